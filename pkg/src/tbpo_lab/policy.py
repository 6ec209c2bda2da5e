"""Autoregressive next-token policies over an enumerated state space.

Both policy kinds expose the same gradient contract: callers describe a loss
``f`` through coefficients ``c_t`` on ``log pi(a_t | s_t)`` and the policy adds
``sum_t c_t * grad log pi(a_t | s_t)`` to a flat gradient buffer.
"""

import json

import numpy as np
from scipy.special import log_softmax, softmax

from . import rng as rng_mod
from .errors import ConfigError, DomainError
from .token_mdp import state_space


class Policy:
    """Common machinery; subclasses provide logits and their backward pass."""

    kind = None

    def __init__(self, spec):
        self.spec = spec
        self.space = state_space(spec)

    # subclass hooks
    def logits(self):
        raise NotImplementedError

    def _backprop_logits(self, sink, G):
        """Add ``dL/dparams`` to ``sink`` given ``G = dL/dlogits`` for every state."""
        raise NotImplementedError

    def log_probs(self):
        """``(n_states, V)`` array of ``log pi(a | s)``."""
        return log_softmax(self.logits(), axis=1)

    def probs(self):
        return softmax(self.logits(), axis=1)

    def logprob(self, s, a):
        i = self.space.lookup(s)
        if not (0 <= a < self.spec.vocab_size):
            raise DomainError(f"action {a} out of range")
        return float(self.log_probs()[i, a])

    def new_sink(self):
        return np.zeros(self.n_params)

    def accumulate_grad(self, sink, terms):
        """``sink += sum c * grad log pi(a | s)`` for ``terms = [(StateId, a, c), ...]``."""
        if not terms:
            return
        idx = np.array([self.space.lookup(s) for s, _, _ in terms])
        acts = np.array([a for _, a, _ in terms])
        coefs = np.array([c for _, _, c in terms], dtype=np.float64)
        self.accumulate_grad_arrays(sink, idx, acts, coefs)

    def accumulate_grad_arrays(self, sink, states, actions, coefs, probs=None):
        n, V = self.space.n_states, self.spec.vocab_size
        C = np.bincount(np.ravel(states) * V + np.ravel(actions),
                        weights=np.ravel(coefs), minlength=n * V).reshape(n, V)
        self.accumulate_action_coefs(sink, C, probs)

    def accumulate_action_coefs(self, sink, C, probs=None):
        """Backward pass for ``sum_{s,a} C[s, a] * log pi(a | s)``."""
        p = self.probs() if probs is None else probs
        self._backprop_logits(sink, C - C.sum(axis=1, keepdims=True) * p)

    def copy(self):
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(self.__dict__)
        other.restore(self.snapshot())
        return other

    def checkpoint_dict(self):
        d = {"kind": self.kind, "spec_hash": self.spec.digest, "params": self.snapshot().tolist()}
        d.update(self._config())
        return d

    def _config(self):
        return {}


class TabularPolicy(Policy):
    """One free logit vector per state."""

    kind = "tabular"

    def __init__(self, spec, logits=None):
        super().__init__(spec)
        shape = (self.space.n_states, spec.vocab_size)
        self._logits = np.zeros(shape) if logits is None else np.array(logits, dtype=np.float64)
        if self._logits.shape != shape:
            raise DomainError(f"logits must have shape {shape}")

    @classmethod
    def random(cls, spec, scale=None, seed=None):
        """Seeded ``N(0, scale^2)`` logits; defaults reproduce the env's reference policy."""
        scale = spec.ref_scale if scale is None else scale
        g = rng_mod.stream(spec.seed if seed is None else seed, "reference")
        return cls(spec, scale * g.standard_normal((state_space(spec).n_states, spec.vocab_size)))

    @classmethod
    def from_log_probs(cls, spec, logp):
        return cls(spec, np.array(logp, dtype=np.float64))

    @property
    def n_params(self):
        return self._logits.size

    def logits(self):
        return self._logits

    def snapshot(self):
        return self._logits.ravel().copy()

    def restore(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self._logits.size,):
            raise DomainError(f"expected {self._logits.size} parameters, got {vec.shape}")
        self._logits = vec.reshape(self._logits.shape).copy()

    def _backprop_logits(self, sink, G):
        sink += G.ravel()


def state_features(spec, window):
    """One-hot of the last ``window`` context tokens plus ``t / H``."""
    sp = state_space(spec)
    V = spec.vocab_size
    X = np.zeros((sp.n_states, window * V + 1))
    for i in range(sp.n_states):
        ctx = sp.context(i)[-window:] if window else ()
        # most recent token occupies slot 0; missing slots stay zero
        for j, tok in enumerate(reversed(ctx)):
            X[i, j * V + tok] = 1.0
        X[i, -1] = sp.depth[i] / spec.horizon
    return X


class FeedForwardPolicy(Policy):
    """``softmax(W2^T tanh(W1^T x + b1) + b2)`` on windowed state features."""

    kind = "feedforward"

    def __init__(self, spec, window=2, hidden=16, seed=0):
        super().__init__(spec)
        if window < 0 or hidden < 1:
            raise ConfigError("window must be >= 0 and hidden >= 1")
        self.window, self.hidden = int(window), int(hidden)
        self.X = state_features(spec, self.window)
        F, V = self.X.shape[1], spec.vocab_size
        self._shapes = [(F, hidden), (hidden,), (hidden, V), (V,)]
        self._sizes = [int(np.prod(s)) for s in self._shapes]
        g = rng_mod.stream(seed, "ff-init")
        self._theta = g.uniform(-0.1, 0.1, sum(self._sizes))

    @property
    def n_params(self):
        return self._theta.size

    def _unpack(self, theta):
        out, k = [], 0
        for shape, size in zip(self._shapes, self._sizes):
            out.append(theta[k:k + size].reshape(shape))
            k += size
        return out

    def logits(self):
        W1, b1, W2, b2 = self._unpack(self._theta)
        return np.tanh(self.X @ W1 + b1) @ W2 + b2

    def snapshot(self):
        return self._theta.copy()

    def restore(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != self._theta.shape:
            raise DomainError(f"expected {self._theta.size} parameters, got {vec.shape}")
        self._theta = vec.copy()

    def _backprop_logits(self, sink, G):
        W1, b1, W2, b2 = self._unpack(self._theta)
        Hh = np.tanh(self.X @ W1 + b1)
        dH = (G @ W2.T) * (1 - Hh ** 2)
        grads = [self.X.T @ dH, dH.sum(0), Hh.T @ G, G.sum(0)]
        sink += np.concatenate([g.ravel() for g in grads])

    def _config(self):
        return {"window": self.window, "hidden": self.hidden}


def policy_from_dict(spec, d):
    if d.get("spec_hash") not in (None, spec.digest):
        raise ConfigError("checkpoint was written for a different environment")
    if d["kind"] == "tabular":
        pol = TabularPolicy(spec)
    elif d["kind"] == "feedforward":
        pol = FeedForwardPolicy(spec, d["window"], d["hidden"])
    else:
        raise ConfigError(f"unknown policy kind {d['kind']!r}")
    pol.restore(np.array(d["params"], dtype=np.float64))
    return pol


def reference_policy(spec):
    """The env's frozen reference: seeded random tabular softmax."""
    return TabularPolicy.random(spec)


def save_policy(policy, path):
    with open(path, "w") as f:
        json.dump(policy.checkpoint_dict(), f)
