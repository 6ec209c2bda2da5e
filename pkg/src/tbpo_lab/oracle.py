"""Backward-induction value tables and the exact pair expectations built on them.

Everything here is computed by enumeration on small MDPs and serves as ground
truth for the trained models.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .core_math import bregman, per_token_loss
from .errors import ConfigError, DomainError
from .token_mdp import enumerate_trajectories, state_space

MAX_TRAJECTORIES = 128


@dataclass(frozen=True)
class ValueTables:
    """Per-state arrays indexed like ``spec.space.states``."""

    spec: object
    beta: float
    q: np.ndarray
    v: np.ndarray
    adv: np.ndarray
    log_z: np.ndarray
    pi_star: np.ndarray
    log_pi_star: np.ndarray
    log_pi_ref: np.ndarray
    kl_star: np.ndarray  # KL(pi_ref || pi_star) per state

    def index(self, s):
        return state_space(self.spec).lookup(s)

    def scores(self, kind):
        kind = getattr(kind, "value", kind)
        if kind in ("q", "Q"):
            return self.q
        if kind in ("a", "A"):
            return self.adv
        raise ConfigError(f"unknown score kind {kind!r}")


def compute_values(spec, pi_ref, beta):
    """Backward induction for ``Q_ref``, ``V``, ``A``, ``log Z`` and ``pi_star``."""
    if not beta > 0:
        raise DomainError("beta must be positive")
    sp = state_space(spec)
    log_ref = pi_ref.log_probs()
    if not np.all(np.isfinite(log_ref)):
        raise DomainError("reference policy must put positive mass on every action")
    ref = np.exp(log_ref)
    n = sp.n_states
    q = np.zeros((n, spec.vocab_size))
    v = np.zeros(n)
    # children always come after parents in breadth-first order
    for i in range(n - 1, -1, -1):
        ch = sp.child[i]
        cont = np.where(ch >= 0, v[np.maximum(ch, 0)], 0.0)
        q[i] = sp.rewards[i] + cont
        v[i] = ref[i] @ q[i]
    adv = q - v[:, None]
    scaled = log_ref + q / beta
    log_z = logsumexp(scaled, axis=1)
    log_pi_star = scaled - log_z[:, None]
    pi_star = np.exp(log_pi_star)
    kl_star = np.sum(ref * (log_ref - log_pi_star), axis=1)
    return ValueTables(spec, float(beta), q, v, adv, log_z, pi_star, log_pi_star, log_ref, kl_star)


def exact_kl(p, q):
    """``KL(p || q)`` with the ``0 ln 0 = 0`` convention."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((p > 0) & (q <= 0)):
        raise DomainError("q must be positive wherever p is")
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def exact_weight_q(vt, s_w, s_l):
    """``Z(s_l) / Z(s_w)``."""
    return float(np.exp(vt.log_z[vt.index(s_l)] - vt.log_z[vt.index(s_w)]))


def exact_weight_a(spec, pi_ref, vt, s_w, s_l):
    """``exp(KL(ref||pi*)|s_l - KL(ref||pi*)|s_w)``."""
    ref = pi_ref.probs()
    iw, il = vt.index(s_w), vt.index(s_l)
    kl_l = exact_kl(ref[il], vt.pi_star[il])
    kl_w = exact_kl(ref[iw], vt.pi_star[iw])
    return float(np.exp(kl_l - kl_w))


@dataclass
class PairBatch:
    """Compared (state, action) positions for a set of ordered pairs.

    Arrays have shape ``(M, T)``; ``weight`` is zero on padded positions and
    the objective is ``sum(weight * loss)``.  ``log_r_data`` is only present
    for exact batches.
    """

    sw: np.ndarray
    aw: np.ndarray
    sl: np.ndarray
    al: np.ndarray
    weight: np.ndarray
    log_r_data: np.ndarray = None

    def subset(self, rows, scale=1.0):
        return PairBatch(self.sw[rows], self.aw[rows], self.sl[rows], self.al[rows],
                         self.weight[rows] * scale,
                         None if self.log_r_data is None else self.log_r_data[rows])

    def __len__(self):
        return self.sw.shape[0]


def exact_pair_batch(spec, vt, kind, behavior=None, measure="symmetric"):
    """Every ordered trajectory pair with its exact per-step weight.

    Pairs ``(y, y')`` are drawn i.i.d. from ``behavior`` (default: the
    reference). At step ``t`` the pair is weighted by the token-level
    Bradley-Terry probability ``sigma(d_t)`` that ``y`` wins, times the
    probability that the two length-``t-1`` prefixes were ordered by the
    prefix product in either direction (``measure="symmetric"``), or in the
    ``y``-first direction only (``measure="literal"``). Weights are normalised
    per step, steps averaged and prompts mixed by their weights.
    """
    if spec.eos:
        raise ConfigError("exact pair enumeration requires the fixed-horizon mode")
    V, H = spec.vocab_size, spec.horizon
    if V ** H > MAX_TRAJECTORIES:
        raise ConfigError(f"V**H = {V ** H} exceeds the exact-enumeration bound {MAX_TRAJECTORIES}")
    if measure not in ("symmetric", "literal"):
        raise ConfigError(f"unknown pair measure {measure!r}")
    log_mu_table = vt.log_pi_ref if behavior is None else behavior.log_probs()
    S = vt.scores(kind)
    pw = np.array([w for _, w in spec.prompts])
    pw = pw / pw.sum()
    parts = []
    for p in range(len(spec.prompts)):
        states, acts = enumerate_trajectories(spec, p)
        mu = np.exp(log_mu_table[states, acts].sum(axis=1))
        N = states.shape[0]
        I, J = np.divmod(np.arange(N * N), N)
        sw, aw, sl, al = states[I], acts[I], states[J], acts[J]
        d = S[sw, aw] - S[sl, al]
        ones = np.ones((N * N, 1))
        prev_w = np.hstack([ones, np.cumprod(expit(d), axis=1)[:, :-1]])
        if measure == "symmetric":
            prev_l = np.hstack([ones, np.cumprod(expit(-d), axis=1)[:, :-1]])
            nu = 0.5 * (prev_w + prev_l)
        else:
            nu = prev_w
        m = (mu[I] * mu[J])[:, None] * nu * expit(d)
        m = m / m.sum(axis=0, keepdims=True)
        parts.append(PairBatch(sw, aw, sl, al, pw[p] * m / H, -d))
    return PairBatch(*(np.concatenate([getattr(b, f) for b in parts])
                       for f in ("sw", "aw", "sl", "al", "weight", "log_r_data")))


def _log_ratios(batch, policy_logp, ref_logp, base, beta):
    x = ((policy_logp[batch.sl, batch.al] - ref_logp[batch.sl, batch.al])
         - (policy_logp[batch.sw, batch.aw] - ref_logp[batch.sw, batch.aw])
         + base[batch.sl] - base[batch.sw])
    return beta * x


def _resolve_base(weight_source, policy, pi_ref, vt, kind):
    if weight_source is None:
        return oracle_weight_base(vt, kind)
    if isinstance(weight_source, np.ndarray):
        return weight_source
    from .weights import WeightContext, state_baseline
    ctx = WeightContext(vt=vt, pi_ref=pi_ref, policy=policy)
    return state_baseline(weight_source, ctx)


def exact_bregman_divergence(spec, pi_ref, behavior, policy, gen, beta, weight_source=None,
                             kind="q", vt=None, batch=None):
    """``D_h(R_data, R_theta)`` by exhaustive pair enumeration.

    ``weight_source`` is a per-state log-baseline array, a ``WeightMode``, or
    ``None`` for the exact weight of the score kind.
    """
    vt = compute_values(spec, pi_ref, beta) if vt is None else vt
    batch = exact_pair_batch(spec, vt, kind, behavior) if batch is None else batch
    base = _resolve_base(weight_source, policy, pi_ref, vt, kind)
    x = _log_ratios(batch, policy.log_probs(), pi_ref.log_probs(), base, beta)
    B = bregman(gen, np.exp(batch.log_r_data), np.exp(x))
    return float(np.sum(batch.weight * B))


def exact_expected_loss(spec, pi_ref, behavior, policy, gen, beta, weight_source=None,
                        kind="q", vt=None, batch=None):
    """The tractable per-token loss averaged under the same exact pair measure."""
    vt = compute_values(spec, pi_ref, beta) if vt is None else vt
    batch = exact_pair_batch(spec, vt, kind, behavior) if batch is None else batch
    base = _resolve_base(weight_source, policy, pi_ref, vt, kind)
    x = _log_ratios(batch, policy.log_probs(), pi_ref.log_probs(), base, beta)
    return float(np.sum(batch.weight * per_token_loss(gen, x)))


def oracle_weight_base(vt, kind):
    """Per-state log-baseline whose differences give the exact weight."""
    kind = getattr(kind, "value", kind)
    return vt.log_z if kind in ("q", "Q") else vt.kl_star
