"""Desk-scale evaluation: distance to the oracle policy and sample-based scores."""

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit, softmax

from . import rng as rng_mod
from .errors import DomainError
from .policy import TabularPolicy
from .token_mdp import rollout, sample_prompt, state_space, total_reward


def tv_to_oracle(policy, vt, states=None):
    """Mean and max of ``0.5 * sum_a |pi(a|s) - pi*(a|s)|`` over ``states``.

    ``states`` may hold :class:`StateId` values or integer indices; ``None``
    means every enumerated state.
    """
    sp = state_space(vt.spec)
    if states is None:
        idx = np.arange(sp.n_states)
    else:
        idx = np.array([s if isinstance(s, (int, np.integer)) else sp.lookup(s) for s in states],
                       dtype=np.int64)
        if idx.size == 0:
            raise DomainError("empty state set")
        if np.any((idx < 0) | (idx >= sp.n_states)):
            raise DomainError("state index out of range")
    # both sides go through the same softmax, so pi* itself scores exactly zero
    star = softmax(vt.log_pi_star[idx], axis=1)
    tv = 0.5 * np.abs(policy.probs()[idx] - star).sum(axis=1)
    return float(tv.mean()), float(tv.max())


def _entropy_rows(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)


def _visited(spec, traj):
    sp = state_space(spec)
    return sp.path(traj.prompt_index, traj.tokens)


def predictive_entropy(policy, spec, prompts, samples_per_prompt, rng):
    """Exact ``H(pi(.|s_t))`` averaged over every token of sampled responses (nats/token)."""
    if samples_per_prompt < 1:
        raise DomainError("samples_per_prompt must be >= 1")
    ent = _entropy_rows(policy.probs())
    visited = []
    for p in prompts:
        for _ in range(samples_per_prompt):
            visited.extend(_visited(spec, rollout(spec, policy, p, rng)))
    if not visited:
        raise DomainError("no tokens were generated")
    return float(np.clip(ent[visited].mean(), 0.0, np.log(spec.vocab_size)))


def distinct1(samples):
    """Unique unigrams over total unigrams."""
    if not samples or any(len(s) == 0 for s in samples):
        raise DomainError("distinct1 needs non-empty samples")
    tokens = [t for s in samples for t in s]
    return len(set(tokens)) / len(tokens)


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def sentence_bleu(hyp, ref, max_n=4):
    """BLEU of one hypothesis against one reference, no smoothing.

    Uses orders ``1..min(max_n, len(hyp), len(ref))`` with uniform weights;
    a zero modified precision gives 0.
    """
    N = min(max_n, len(hyp), len(ref))
    if N < 1:
        return 0.0
    log_p = 0.0
    for n in range(1, N + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        match = sum(min(c, r[g]) for g, c in h.items())
        if match == 0:
            return 0.0
        log_p += np.log(match / sum(h.values())) / N
    bp = min(1.0, np.exp(1 - len(ref) / len(hyp)))
    return float(bp * np.exp(log_p))


def self_bleu(samples, max_n=4):
    """Mean BLEU over ordered pairs ``(hyp, ref)`` of distinct sample positions."""
    if len(samples) < 2:
        raise DomainError("self_bleu needs at least two samples")
    scores = [sentence_bleu(list(h), list(r), max_n)
              for i, h in enumerate(samples) for j, r in enumerate(samples) if i != j]
    return float(np.clip(np.mean(scores), 0.0, 1.0))


@dataclass
class LcFit:
    lcwr: float
    raw_wr: float
    delta_theta: float
    lam: float
    se_delta_theta: float
    se_lam: float
    scale: float
    saturated: bool
    iterations: int


def lc_win_rate(labels, scale=None, tol=1e-8, max_iter=100_000):
    """Length-controlled win rate from ``Pr(y=1) = sigma(dtheta + lam * tanh(dl / s))``.

    ``labels`` holds dicts with ``y`` (0 or 1; 0.5 for a tie) and the two
    lengths.  Fitted by full-batch gradient descent on the mean negative
    log-likelihood with step ``1 / L``, ``L`` the curvature bound.
    """
    if len(labels) < 10:
        raise DomainError("lc_win_rate needs at least 10 labels")
    y = np.array([float(r["y"]) for r in labels])
    if np.any((y < 0) | (y > 1)):
        raise DomainError("labels must lie in [0, 1]")
    dl = np.array([r["len_a"] - r["len_b"] for r in labels], dtype=np.float64)
    raw = 100.0 * float(y.mean())
    s = float(np.std(dl)) if scale is None else float(scale)
    if s <= 0:
        s = 1.0
    g = np.tanh(dl / s)
    if np.all(y == y[0]) and y[0] in (0.0, 1.0):
        sign = 1.0 if y[0] == 1.0 else -1.0
        return LcFit(100.0 * y[0], raw, sign * np.inf, 0.0, np.nan, np.nan, s, True, 0)
    has_len = bool(np.any(g != 0))
    X = np.column_stack([np.ones_like(g), g]) if has_len else np.ones((y.size, 1))
    L = 0.25 * np.linalg.eigvalsh(X.T @ X / y.size).max()
    w = np.zeros(X.shape[1])
    it = 0
    for it in range(1, max_iter + 1):
        grad = X.T @ (expit(X @ w) - y) / y.size
        if np.linalg.norm(grad) <= tol:
            break
        w -= grad / L
    p = expit(X @ w)
    fisher = (X * (p * (1 - p))[:, None]).T @ X
    se = np.sqrt(np.diag(np.linalg.inv(fisher)))
    lam, se_lam = (w[1], se[1]) if has_len else (0.0, np.nan)
    return LcFit(100.0 * float(expit(w[0])), raw, float(w[0]), float(lam), float(se[0]),
                 float(se_lam), s, False, it)


def _match_labels(spec, policy, opponent, n_prompts, rng):
    labels, samples = [], []
    for _ in range(n_prompts):
        p = sample_prompt(spec, rng)
        ya = rollout(spec, policy, p, rng)
        yb = rollout(spec, opponent, p, rng)
        ra, rb = total_reward(spec, ya), total_reward(spec, yb)
        y = 1.0 if ra > rb else 0.0 if ra < rb else 0.5
        labels.append({"y": y, "len_a": len(ya.tokens), "len_b": len(yb.tokens)})
        samples.append(ya)
    return labels, samples


def win_rate_vs_oracle(policy, spec, vt, n_prompts, rng):
    """Percentage of prompts where a policy sample out-scores a reference sample (ties 0.5)."""
    if n_prompts < 1:
        raise DomainError("n_prompts must be >= 1")
    ref = TabularPolicy.from_log_probs(spec, vt.log_pi_ref)
    labels, _ = _match_labels(spec, policy, ref, n_prompts, rng)
    return 100.0 * float(np.mean([r["y"] for r in labels]))


@dataclass
class EvalReport:
    tv_mean: float
    tv_max: float
    win_rate: float
    lc_win_rate: float
    predictive_entropy: float
    distinct1: float
    self_bleu: float
    n_prompts: int
    n_samples_per_prompt: int
    lc_delta_theta: float = 0.0
    lc_lambda: float = 0.0
    lc_saturated: bool = False
    config_digest: str = ""

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _finite(x):
    return x if np.isfinite(x) else (1e308 if x > 0 else -1e308)


def evaluate(policy, spec, vt, n_prompts=1000, samples_per_prompt=5, seed=0, rows=None):
    """Run every metric with seeded per-metric streams.

    When ``rows`` is a list, one dict per match-up prompt is appended to it.
    """
    tv_mean, tv_max = tv_to_oracle(policy, vt)
    ref = TabularPolicy.from_log_probs(spec, vt.log_pi_ref)
    labels, _ = _match_labels(spec, policy, ref, n_prompts, rng_mod.stream(seed, "eval", "match"))
    fit = lc_win_rate(labels)
    g = rng_mod.stream(seed, "eval", "diversity")
    prompts = range(len(spec.prompts))
    ent = predictive_entropy(policy, spec, prompts, samples_per_prompt, g)
    d1, sb = [], []
    for p in prompts:
        samples = [rollout(spec, policy, p, g).tokens for _ in range(samples_per_prompt)]
        d1.append(distinct1(samples))
        sb.append(self_bleu(samples) if len(samples) >= 2 else 1.0)
    if rows is not None:
        for i, r in enumerate(labels):
            rows.append({"index": i, **r})
    cfg = {"spec_hash": spec.digest, "beta": vt.beta, "n_prompts": n_prompts,
           "samples_per_prompt": samples_per_prompt, "seed": seed}
    digest = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
    return EvalReport(tv_mean, tv_max, 100.0 * float(np.mean([r["y"] for r in labels])),
                      fit.lcwr, ent, float(np.mean(d1)), float(np.mean(sb)), n_prompts,
                      samples_per_prompt, _finite(fit.delta_theta), fit.lam, fit.saturated, digest)


def exact_entropy(p):
    """``-sum p ln p`` for one distribution."""
    return float(_entropy_rows(np.atleast_2d(np.asarray(p, dtype=np.float64)))[0])


__all__ = ["tv_to_oracle", "predictive_entropy", "distinct1", "self_bleu", "sentence_bleu",
           "lc_win_rate", "LcFit", "win_rate_vs_oracle", "EvalReport", "evaluate",
           "exact_entropy"]
