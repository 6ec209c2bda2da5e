"""Per-state weights ``w_t`` used inside the token ratio.

Every supported weight is a difference of a state-only baseline,
``log w_t = c(s_l) - c(s_w)``, so the compared actions never enter.  The
baseline is ``log Z`` (exact TBPO-Q), ``KL(ref || pi*)`` (exact TBPO-A), a
learned head ``b_phi`` or a K3 estimate of ``KL(ref || pi_theta)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .errors import ConfigError, DomainError
from .policy import state_features
from .token_mdp import state_space

MODES = ("unit", "oracle_q", "oracle_a", "learned_head", "k3")


@dataclass(frozen=True)
class WeightMode:
    mode: str = "unit"
    k3_samples: int = 64
    k3_exact: bool = False
    k3_flow: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"weight mode must be one of {MODES}, got {self.mode!r}")
        if self.k3_samples < 1:
            raise ConfigError("k3_samples must be >= 1")

    def check_variant(self, variant):
        if self.mode == "learned_head" and variant != "q":
            raise ConfigError("the learned baseline head is only defined for variant Q")
        if self.mode == "k3" and variant != "a":
            raise ConfigError("the K3 KL baseline is only defined for variant A")

    def to_dict(self):
        return {"weight_mode": self.mode, "k3_samples": self.k3_samples,
                "k3_exact": self.k3_exact, "k3_flow": self.k3_flow}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("weight_mode", "unit"), int(d.get("k3_samples", 64)),
                   bool(d.get("k3_exact", False)), bool(d.get("k3_flow", False)))


@dataclass
class WeightContext:
    vt: object = None
    head: object = None
    pi_ref: object = None
    policy: object = None
    rng: object = None
    # filled by state_baseline in K3 mode: per-state action weights of the estimator
    k3_action_weights: np.ndarray = field(default=None, repr=False)


class TabularHead:
    """Free scalar ``b(s)`` per state."""

    kind = "tabular"

    def __init__(self, spec, values=None):
        self.spec = spec
        n = state_space(spec).n_states
        self.b = np.zeros(n) if values is None else np.array(values, dtype=np.float64)
        if self.b.shape != (n,):
            raise DomainError(f"head values must have shape ({n},)")

    @property
    def n_params(self):
        return self.b.size

    def values(self):
        return self.b

    def snapshot(self):
        return self.b.copy()

    def restore(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != self.b.shape:
            raise DomainError("head parameter length mismatch")
        self.b = vec.copy()

    def accumulate(self, sink, coefs):
        """``sink += d/dphi sum_s coefs[s] * b(s)``."""
        sink += coefs

    def checkpoint_dict(self):
        return {"kind": self.kind, "params": self.b.tolist()}


class MlpHead:
    """One hidden tanh layer over the policy's state features."""

    kind = "mlp"

    def __init__(self, spec, window=2, hidden=32, seed=0):
        self.spec = spec
        self.window, self.hidden = window, hidden
        self.X = state_features(spec, window)
        F = self.X.shape[1]
        self._shapes = [(F, hidden), (hidden,), (hidden,), ()]
        self._sizes = [int(np.prod(s)) for s in self._shapes]
        self.theta = rng_mod.stream(seed, "head-init").uniform(-0.1, 0.1, sum(self._sizes))

    @property
    def n_params(self):
        return self.theta.size

    def _unpack(self):
        out, k = [], 0
        for shape, size in zip(self._shapes, self._sizes):
            out.append(self.theta[k:k + size].reshape(shape))
            k += size
        return out

    def values(self):
        W1, b1, w2, c = self._unpack()
        return np.tanh(self.X @ W1 + b1) @ w2 + c

    def snapshot(self):
        return self.theta.copy()

    def restore(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != self.theta.shape:
            raise DomainError("head parameter length mismatch")
        self.theta = vec.copy()

    def accumulate(self, sink, coefs):
        W1, b1, w2, c = self._unpack()
        Hh = np.tanh(self.X @ W1 + b1)
        dH = np.outer(coefs, w2) * (1 - Hh ** 2)
        sink += np.concatenate([(self.X.T @ dH).ravel(), dH.sum(0), Hh.T @ coefs,
                                [coefs.sum()]])

    def checkpoint_dict(self):
        return {"kind": self.kind, "window": self.window, "hidden": self.hidden,
                "params": self.theta.tolist()}


def head_from_dict(spec, d):
    if d is None:
        return None
    head = TabularHead(spec) if d["kind"] == "tabular" else MlpHead(spec, d["window"], d["hidden"])
    head.restore(np.array(d["params"], dtype=np.float64))
    return head


def head_log_weight(head, s_w, s_l):
    """``b(s_l) - b(s_w)``."""
    sp = state_space(head.spec)
    b = head.values()
    return float(b[sp.lookup(s_l)] - b[sp.lookup(s_w)])


def fit_head_to_log_z(head, vt, steps=3000, lr=0.05):
    """Least-squares regression of the head onto the exact ``log Z`` (verification only)."""
    if isinstance(head, TabularHead):
        head.restore(vt.log_z)
        return head
    m = np.zeros(head.n_params)
    v = np.zeros(head.n_params)
    n = vt.log_z.size
    for t in range(1, steps + 1):
        r = head.values() - vt.log_z
        g = np.zeros(head.n_params)
        head.accumulate(g, 2 * r / n)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        head.restore(head.snapshot() - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8))
    return head


def _k3_terms(log_ref, log_theta):
    """``(r - 1) - ln r`` per action with ``r = pi_theta / pi_ref``."""
    log_r = log_theta - log_ref
    return np.expm1(log_r) - log_r


def k3_kl(pi_ref, pi_theta, s, rng, n):
    """K3 Monte-Carlo estimate of ``KL(pi_ref || pi_theta)`` at state ``s``."""
    if n < 1:
        raise DomainError("n must be >= 1")
    i = pi_ref.space.lookup(s)
    log_ref = pi_ref.log_probs()[i]
    if not np.all(np.isfinite(log_ref)):
        raise DomainError("reference policy has zero mass on some action")
    ref = np.exp(log_ref)
    a = np.minimum(np.searchsorted(np.cumsum(ref), rng.random(n), side="right"), ref.size - 1)
    return float(np.mean(_k3_terms(log_ref[a], pi_theta.log_probs()[i, a])))


def k3_action_weights(log_ref, rng, n, exact):
    """Per-state empirical action frequencies of ``n`` reference samples (or the exact probabilities)."""
    ref = np.exp(log_ref)
    if exact:
        return ref
    cdf = np.cumsum(ref, axis=1)
    u = rng.random((ref.shape[0], n))
    a = np.minimum((u[:, :, None] >= cdf[:, None, :]).sum(axis=2), ref.shape[1] - 1)
    W = np.zeros_like(ref)
    np.add.at(W, (np.repeat(np.arange(ref.shape[0]), n), a.ravel()), 1.0 / n)
    return W


def _spec_of(ctx):
    for obj in (ctx.policy, ctx.pi_ref, ctx.vt, ctx.head):
        if obj is not None:
            return obj.spec
    raise ConfigError("weight context carries no environment")


def state_baseline(mode, ctx, policy_logp=None):
    """Per-state log-baseline ``c`` with ``log w = c[s_l] - c[s_w]``."""
    m = mode.mode
    if m == "unit":
        n = state_space(_spec_of(ctx)).n_states
        return np.zeros(n)
    if m in ("oracle_q", "oracle_a"):
        if ctx.vt is None:
            raise ConfigError(f"weight mode {m} needs value tables")
        return ctx.vt.log_z if m == "oracle_q" else ctx.vt.kl_star
    if m == "learned_head":
        if ctx.head is None:
            raise ConfigError("weight mode learned_head needs a baseline head")
        return ctx.head.values()
    if ctx.pi_ref is None or ctx.policy is None:
        raise ConfigError("weight mode k3 needs both the reference and the current policy")
    log_ref = ctx.pi_ref.log_probs()
    log_theta = ctx.policy.log_probs() if policy_logp is None else policy_logp
    if not mode.k3_exact and ctx.rng is None:
        raise ConfigError("sampled K3 needs a random stream")
    W = k3_action_weights(log_ref, ctx.rng, mode.k3_samples, mode.k3_exact)
    ctx.k3_action_weights = W
    return np.sum(W * _k3_terms(log_ref, log_theta), axis=1)


def weight_log(mode, ctx, s_w, s_l):
    """``log w_t`` for one pair of compared states."""
    sp = state_space(_spec_of(ctx))
    base = state_baseline(mode, ctx)
    return float(base[sp.lookup(s_l)] - base[sp.lookup(s_w)])
