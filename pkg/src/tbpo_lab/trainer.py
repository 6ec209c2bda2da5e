"""Mini-batch optimisation of the token-level ratio-matching loss.

The loss over a :class:`PairBatch` is ``sum(weight * l(ln R_theta))``.  The
backward pass routes ``dl/dlnR * (+-beta)`` onto ``log pi_theta`` of the two
compared tokens and, when a baseline head supplies ``log w``, onto ``b(s_l)``
and ``b(s_w)``.
"""

import csv
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rng_mod
from .core_math import GeneratorSpec, per_token_loss, per_token_loss_grad
from .errors import ConfigError, NumericError
from .oracle import PairBatch
from .policy import FeedForwardPolicy, TabularPolicy, policy_from_dict
from .pref_data import PreferenceDataset, dataset_batch
from .weights import (MlpHead, TabularHead, WeightContext, WeightMode, head_from_dict,
                      state_baseline)


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "rmsprop"
    decay: float = 0.9        # rmsprop rho
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("rmsprop", "adam"):
            raise ConfigError(f"optimizer must be 'rmsprop' or 'adam', got {self.kind!r}")

    def to_dict(self):
        if self.kind == "rmsprop":
            return {"kind": "rmsprop", "decay": self.decay, "eps": self.eps}
        return {"kind": "adam", "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("kind", "decay", "beta1", "beta2", "eps") if k in d})


class OptimizerState:
    """Moment buffers for one parameter vector."""

    def __init__(self, spec, n):
        self.spec = spec
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def to_dict(self):
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}

    def load(self, d):
        self.m = np.array(d["m"], dtype=np.float64)
        self.v = np.array(d["v"], dtype=np.float64)
        self.t = int(d["t"])


def optimizer_step(state, params, grads, lr):
    """One descent step; returns the new parameter vector.

    RMSProp: ``v <- rho v + (1-rho) g^2``, ``theta <- theta - lr g / (sqrt(v) + eps)``.
    Adam: bias-corrected first and second moments, ``theta - lr m_hat / (sqrt(v_hat) + eps)``.
    """
    if params.shape != grads.shape or state.v.shape != params.shape:
        raise ValueError("optimizer shape mismatch")
    o = state.spec
    state.t += 1
    if o.kind == "rmsprop":
        state.v = o.decay * state.v + (1 - o.decay) * grads * grads
        return params - lr * grads / (np.sqrt(state.v) + o.eps)
    state.m = o.beta1 * state.m + (1 - o.beta1) * grads
    state.v = o.beta2 * state.v + (1 - o.beta2) * grads * grads
    m_hat = state.m / (1 - o.beta1 ** state.t)
    v_hat = state.v / (1 - o.beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + o.eps)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "q"
    generator: GeneratorSpec = field(default_factory=lambda: GeneratorSpec.sba(0.0, 4.0))
    beta: float = 0.1
    weight_mode: WeightMode = field(default_factory=WeightMode)
    epochs: int = 1
    batch_size: int = 32
    policy_lr: float = 5e-3
    head_lr: float = 1e-3
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    head_optimizer: OptimizerSpec = field(default_factory=lambda: OptimizerSpec("adam"))
    seed: int = 0
    init_from_ref: bool = False
    grad_clip: float = None
    policy_kind: str = "tabular"
    window: int = 2
    hidden: int = 16
    head_hidden: int = 32
    divergence_limit: float = 1e3  # logits past ~709 put policy ratios beyond float64 exp range
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.variant not in ("q", "a"):
            raise ConfigError(f"variant must be 'q' or 'a', got {self.variant!r}")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.policy_lr < 0 or self.head_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.policy_kind not in ("tabular", "feedforward"):
            raise ConfigError(f"unknown policy kind {self.policy_kind!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive")
        self.weight_mode.check_variant(self.variant)

    def to_dict(self):
        d = {
            "variant": self.variant, "generator": self.generator.to_dict(), "beta": self.beta,
            "epochs": self.epochs, "batch_size": self.batch_size, "policy_lr": self.policy_lr,
            "head_lr": self.head_lr, "optimizer": self.optimizer.to_dict(),
            "head_optimizer": self.head_optimizer.to_dict(), "seed": self.seed,
            "init_from_ref": self.init_from_ref, "grad_clip": self.grad_clip,
            "policy_kind": self.policy_kind, "window": self.window, "hidden": self.hidden,
            "head_hidden": self.head_hidden, "divergence_limit": self.divergence_limit,
            "checkpoint_every": self.checkpoint_every,
        }
        d.update(self.weight_mode.to_dict())
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        if "generator" in d:
            kw["generator"] = GeneratorSpec.from_dict(d.pop("generator"))
        if "optimizer" in d:
            kw["optimizer"] = OptimizerSpec.from_dict(d.pop("optimizer"))
        if "head_optimizer" in d:
            kw["head_optimizer"] = OptimizerSpec.from_dict(d.pop("head_optimizer"))
        kw["weight_mode"] = WeightMode.from_dict(d)
        for k in ("weight_mode", "k3_samples", "k3_exact", "k3_flow"):
            d.pop(k, None)
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        kw.update(d)
        return cls(**kw)


@dataclass
class ForwardResult:
    loss: float
    policy_grad: np.ndarray
    head_grad: np.ndarray
    log_r: np.ndarray
    mask: np.ndarray


def make_policy(cfg, spec, pi_ref):
    if cfg.policy_kind == "tabular":
        pol = TabularPolicy(spec)
        if cfg.init_from_ref:
            pol.restore(pi_ref.log_probs().ravel())
        return pol
    return FeedForwardPolicy(spec, cfg.window, cfg.hidden, seed=cfg.seed)


def make_head(cfg, spec):
    if cfg.weight_mode.mode != "learned_head":
        return None
    if cfg.policy_kind == "tabular":
        return TabularHead(spec)
    return MlpHead(spec, cfg.window, cfg.head_hidden, seed=cfg.seed)


def _context(ctx, policy, pi_ref):
    ctx = WeightContext() if ctx is None else ctx
    return WeightContext(vt=ctx.vt, head=ctx.head, pi_ref=pi_ref, policy=policy, rng=ctx.rng)


def batch_forward(cfg, policy, pi_ref, batch, weights_ctx=None, need_grad=True):
    """Loss and gradients of ``sum(weight * l(ln R))`` over a pair batch.

    ``weights_ctx`` carries whatever the weight mode needs; its policy fields are overwritten.
    """
    mode = cfg.weight_mode
    ctx = _context(weights_ctx, policy, pi_ref)
    head = ctx.head
    logp = policy.log_probs()
    ref_logp = pi_ref.log_probs()
    base = state_baseline(mode, ctx, policy_logp=logp)
    beta = cfg.beta
    x = beta * ((logp[batch.sl, batch.al] - ref_logp[batch.sl, batch.al])
                - (logp[batch.sw, batch.aw] - ref_logp[batch.sw, batch.aw])
                + base[batch.sl] - base[batch.sw])
    mask = batch.weight != 0
    loss = float(np.sum(np.where(mask, batch.weight * per_token_loss(cfg.generator, x), 0.0)))
    if not need_grad:
        return ForwardResult(loss, None, None, x, mask)
    g = np.where(mask, batch.weight * per_token_loss_grad(cfg.generator, x) * beta, 0.0)
    n, V = policy.space.n_states, policy.spec.vocab_size
    C = (np.bincount((batch.sl * V + batch.al).ravel(), g.ravel(), n * V)
         - np.bincount((batch.sw * V + batch.aw).ravel(), g.ravel(), n * V)).reshape(n, V)
    state_coef = np.bincount(batch.sl.ravel(), g.ravel(), n) - np.bincount(batch.sw.ravel(), g.ravel(), n)
    if mode.mode == "k3" and mode.k3_flow:
        # d k3(s) / d log pi_theta(a|s) = W[s, a] * (r - 1)
        r_minus_1 = np.expm1(logp - ref_logp)
        C = C + state_coef[:, None] * ctx.k3_action_weights * r_minus_1
    policy_grad = policy.new_sink()
    policy.accumulate_action_coefs(policy_grad, C, np.exp(logp))
    head_grad = None
    if head is not None and mode.mode == "learned_head":
        head_grad = np.zeros(head.n_params)
        head.accumulate(head_grad, state_coef)
    return ForwardResult(loss, policy_grad, head_grad, x, mask)


def pair_forward(cfg, policy, pi_ref, weights_ctx, pair):
    """Loss and gradient terms for a single preference pair.

    Returns ``(loss, terms, head_terms)`` where ``terms`` lists
    ``(StateId, token, coefficient)`` on ``log pi_theta`` and ``head_terms``
    lists ``(StateId, coefficient)`` on ``b_phi`` (empty unless a head is used).
    """
    spec = policy.spec
    batch = dataset_batch(spec, PreferenceDataset(spec.digest, cfg.variant, [pair]))
    res = batch_forward(cfg, policy, pi_ref, batch, weights_ctx, need_grad=False)
    if not np.isfinite(res.loss):
        raise NumericError("non-finite pair loss", pair_index=0)
    g = batch.weight[0] * per_token_loss_grad(cfg.generator, res.log_r[0]) * cfg.beta
    use_head = weights_ctx is not None and weights_ctx.head is not None \
        and cfg.weight_mode.mode == "learned_head"
    states = policy.space.states
    terms, head_terms = [], []
    for t in range(batch.weight.shape[1]):
        sl, al, sw, aw = batch.sl[0, t], batch.al[0, t], batch.sw[0, t], batch.aw[0, t]
        terms.append((states[sl], int(al), float(g[t])))
        terms.append((states[sw], int(aw), float(-g[t])))
        if use_head:
            head_terms.append((states[sl], float(g[t])))
            head_terms.append((states[sw], float(-g[t])))
    return res.loss, terms, head_terms


def _clip(g, limit):
    if limit is None:
        return g
    norm = np.linalg.norm(g)
    return g * (limit / norm) if norm > limit else g


def tv_distance(policy, vt, states=None):
    p, q = policy.probs(), vt.pi_star
    if states is not None:
        p, q = p[states], q[states]
    tv = 0.5 * np.abs(p - q).sum(axis=1)
    return float(tv.mean()), float(tv.max())


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    aborted: bool = False
    abort_step: int = None
    abort_pair: int = None
    abort_message: str = ""

    def final(self, key):
        return self.rows[-1][key] if self.rows else None

    def write_csv(self, path):
        cols = ["epoch", "step", "loss", "grad_norm", "mean_abs_logR", "tv_to_oracle", "seconds"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow(["" if r.get(c) is None else r[c] for c in cols])
            if self.aborted:
                w.writerow(["ABORT", self.abort_step, "", "", "", "", self.abort_message])


class TrainState:
    """Everything needed to resume: parameters, optimizer moments, epoch counter."""

    def __init__(self, cfg, spec, policy, head):
        self.cfg, self.spec, self.policy, self.head = cfg, spec, policy, head
        self.opt = OptimizerState(cfg.optimizer, policy.n_params)
        self.head_opt = OptimizerState(cfg.head_optimizer, head.n_params) if head is not None else None
        self.epoch = 0
        self.step = 0

    def checkpoint_dict(self):
        return {
            "version": 1,
            "spec_hash": self.spec.digest,
            "epoch": self.epoch,
            "step": self.step,
            "policy": self.policy.checkpoint_dict(),
            "head": None if self.head is None else self.head.checkpoint_dict(),
            "optimizer": self.opt.to_dict(),
            "head_optimizer": None if self.head_opt is None else self.head_opt.to_dict(),
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.checkpoint_dict(), f)

    @classmethod
    def from_checkpoint(cls, cfg, spec, d):
        if d.get("spec_hash") != spec.digest:
            raise ConfigError("checkpoint was written for a different environment")
        st = cls(cfg, spec, policy_from_dict(spec, d["policy"]), head_from_dict(spec, d.get("head")))
        st.opt.load(d["optimizer"])
        if st.head_opt is not None and d.get("head_optimizer"):
            st.head_opt.load(d["head_optimizer"])
        st.epoch, st.step = int(d["epoch"]), int(d["step"])
        return st


def _batches(cfg, data, epoch):
    """Yield ``(row_index_array, batch)`` for one epoch."""
    if data.log_r_data is not None:
        # exact expectation: one full-batch step per epoch
        yield np.arange(len(data)), data
        return
    order = rng_mod.stream(cfg.seed, "shuffle", epoch).permutation(len(data))
    for k in range(0, len(order), cfg.batch_size):
        rows = np.sort(order[k:k + cfg.batch_size])
        yield rows, data.subset(rows, 1.0 / len(rows))


def _first_bad_pair(cfg, state, pi_ref, batch, rows, ctx, seed_key):
    for j in range(len(rows)):
        ctx.rng = rng_mod.stream(*seed_key)
        r = batch_forward(cfg, state.policy, pi_ref, batch.subset([j]), ctx)
        if not (np.isfinite(r.loss) and np.all(np.isfinite(r.policy_grad))):
            return int(rows[j])
    return int(rows[0])


def train(cfg, data, spec, pi_ref, oracle=None, state=None, out_dir=None, progress=None):
    """Optimise a policy (and head) on a dataset or an exact pair batch.

    ``data`` is a :class:`PreferenceDataset` (mini-batches, reshuffled every
    epoch) or an exact :class:`PairBatch` (one full-batch step per epoch).
    ``oracle`` supplies value tables for oracle weights and the TV trace.
    Returns ``(policy, head, report)``; a numeric failure stops training and
    is recorded in the report instead of raising.
    """
    if isinstance(data, PreferenceDataset):
        if data.spec_hash != spec.digest:
            raise ConfigError("dataset spec_hash does not match the environment")
        data = dataset_batch(spec, data)
    if cfg.weight_mode.mode in ("oracle_q", "oracle_a") and oracle is None:
        raise ConfigError("oracle weight modes need value tables")
    if state is None:
        pol = make_policy(cfg, spec, pi_ref)
        state = TrainState(cfg, spec, pol, make_head(cfg, spec))
    report = TrainReport()
    t0 = time.perf_counter()
    start = state.epoch
    for epoch in range(start + 1, start + cfg.epochs + 1):
        losses, norms, logr = [], [], []
        for rows, batch in _batches(cfg, data, epoch):
            seed_key = (cfg.seed, "k3", state.step)
            ctx = WeightContext(vt=oracle, head=state.head, rng=rng_mod.stream(*seed_key))
            res = batch_forward(cfg, state.policy, pi_ref, batch, ctx)
            grad = res.policy_grad
            ok = np.isfinite(res.loss) and np.all(np.isfinite(grad))
            if res.head_grad is not None:
                ok = ok and np.all(np.isfinite(res.head_grad))
            if not ok:
                report.aborted, report.abort_step = True, state.step
                report.abort_pair = _first_bad_pair(cfg, state, pi_ref, batch, rows, ctx, seed_key)
                report.abort_message = f"non-finite loss or gradient at pair {report.abort_pair}"
                break
            new = optimizer_step(state.opt, state.policy.snapshot(), _clip(grad, cfg.grad_clip),
                                 cfg.policy_lr)
            if res.head_grad is not None:
                new_h = optimizer_step(state.head_opt, state.head.snapshot(),
                                       _clip(res.head_grad, cfg.grad_clip), cfg.head_lr)
                if not np.all(np.isfinite(new_h)) or np.max(np.abs(new_h)) > cfg.divergence_limit:
                    report.aborted, report.abort_step = True, state.step
                    report.abort_message = "baseline head diverged"
                    break
                state.head.restore(new_h)
            if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > cfg.divergence_limit:
                report.aborted, report.abort_step = True, state.step
                report.abort_pair = int(rows[0])
                report.abort_message = (f"parameters left the finite range "
                                        f"(|param| > {cfg.divergence_limit:g})")
                break
            state.policy.restore(new)
            state.step += 1
            losses.append(res.loss)
            norms.append(float(np.linalg.norm(grad)))
            m = res.mask
            logr.append(float(np.abs(res.log_r[m]).mean()) if m.any() else 0.0)
        if report.aborted:
            break
        state.epoch = epoch
        row = {"epoch": epoch, "step": state.step, "loss": float(np.mean(losses)),
               "grad_norm": float(np.mean(norms)), "mean_abs_logR": float(np.mean(logr)),
               "tv_to_oracle": tv_distance(state.policy, oracle)[0] if oracle is not None else None,
               "seconds": round(time.perf_counter() - t0, 6)}
        report.rows.append(row)
        if progress is not None:
            progress(row)
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            state.save(os.path.join(out_dir, f"ckpt_epoch{epoch}.json"))
    return state.policy, state.head, report


def _as_batch(spec, cfg, pairs):
    if isinstance(pairs, PairBatch):
        return pairs
    if isinstance(pairs, PreferenceDataset):
        return dataset_batch(spec, pairs)
    return dataset_batch(spec, PreferenceDataset(spec.digest, cfg.variant, list(pairs)))


def grad_check(cfg, policy, pi_ref, weights_ctx, pairs_sample, step=1e-5, n_coords=200, seed=0):
    """Max relative error between the analytic gradient and central differences.

    ``pairs_sample`` is a :class:`PairBatch` or any collection of pairs.
    Coordinates are sampled from the policy parameters and, in learned-head
    mode, the head parameters; every coordinate is used when fewer than
    ``n_coords`` exist.  K3 sampling reuses one stream for every evaluation.
    """
    batch = _as_batch(policy.spec, cfg, pairs_sample)
    ctx = _context(weights_ctx, policy, pi_ref)
    rseed = (seed, "gradcheck")

    def run(need_grad):
        ctx.rng = rng_mod.stream(*rseed)
        return batch_forward(cfg, policy, pi_ref, batch, ctx, need_grad)

    res = run(True)
    blocks = [(policy, res.policy_grad)]
    if ctx.head is not None and res.head_grad is not None:
        blocks.append((ctx.head, res.head_grad))
    total = sum(b.n_params for b, _ in blocks)
    picks = np.arange(total)
    if total > n_coords:
        picks = np.sort(rng_mod.stream(seed, "gradcheck-coords").choice(total, n_coords, replace=False))
    worst, offset = 0.0, 0
    for obj, analytic in blocks:
        base = obj.snapshot()
        local = picks[(picks >= offset) & (picks < offset + obj.n_params)] - offset
        for k in local:
            e = np.zeros_like(base)
            e[k] = step
            obj.restore(base + e)
            f_plus = run(False).loss
            obj.restore(base - e)
            f_minus = run(False).loss
            fd = (f_plus - f_minus) / (2 * step)
            worst = max(worst, abs(analytic[k] - fd) / (abs(fd) + 1e-8))
        obj.restore(base)
        offset += obj.n_params
    return float(worst)


def exact_training_config(cfg, steps):
    """Copy of ``cfg`` for full-batch exact-expectation runs of ``steps`` steps."""
    return replace(cfg, epochs=steps, checkpoint_every=0)


def oracle_mode_for(variant):
    return WeightMode("oracle_q" if variant == "q" else "oracle_a")


__all__ = [
    "OptimizerSpec", "OptimizerState", "optimizer_step", "TrainConfig", "TrainReport",
    "TrainState", "batch_forward", "pair_forward", "train", "grad_check", "tv_distance",
    "make_policy", "make_head", "exact_training_config", "oracle_mode_for",
]
