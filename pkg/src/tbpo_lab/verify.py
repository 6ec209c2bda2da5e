"""Numerical checks behind ``tbpo-lab verify``.

Each check yields ``{"name", "residual", "tolerance", "passed", "detail"}``;
a check passes when ``residual <= tolerance``.
"""

import time

import numpy as np
from scipy.special import log_expit, logsumexp

from . import rng as rng_mod
from .core_math import GeneratorSpec, bregman
from .errors import ConfigError
from .oracle import (MAX_TRAJECTORIES, PairBatch, compute_values, exact_bregman_divergence,
                     exact_expected_loss, exact_kl, exact_pair_batch, oracle_weight_base)
from .policy import FeedForwardPolicy, TabularPolicy, reference_policy
from .pref_data import dataset_batch, generate_dataset
from .token_mdp import MdpSpec, TableReward
from .trainer import TrainConfig, batch_forward, grad_check, train, tv_distance
from .weights import MlpHead, TabularHead, WeightContext, WeightMode, _k3_terms, k3_kl

IDENTITY_MDPS = ((2, 2, 0), (2, 4, 1), (3, 3, 2), (4, 2, 3), (4, 3, 4))
BETAS = (0.1, 0.5, 1.0)
GENERATORS = (GeneratorSpec.logistic(), GeneratorSpec.kliep(), GeneratorSpec.lsif(),
              GeneratorSpec.sba(0.0, 4.0), GeneratorSpec.sba(0.5, 4.0))
GRAD_GENERATORS = GENERATORS[:4]


def default_spec():
    """The small Table-mode instance used by exact checks."""
    return MdpSpec(3, 3, seed=0, reward=TableReward(seed=0, scale=1.0))


def _gen_name(g):
    return g.kind.value if g.kind.value != "sba" else f"sba(lam={g.lam:g},s={g.s:g})"


def _pairs_same_prompt(spec):
    """Flat (state, action) index grid restricted to pairs sharing a prompt."""
    sp = spec.space
    V = spec.vocab_size
    s = np.repeat(np.arange(sp.n_states), V)
    a = np.tile(np.arange(V), sp.n_states)
    I, J = np.meshgrid(np.arange(s.size), np.arange(s.size), indexing="ij")
    keep = sp.prompt_of[s[I]] == sp.prompt_of[s[J]]
    return s[I[keep]], a[I[keep]], s[J[keep]], a[J[keep]]


def identity_residual(spec, beta, kind):
    """Max |log residual| of the pi* ratio identity over all (s, a) pairs."""
    ref = reference_policy(spec)
    vt = compute_values(spec, ref, beta)
    sw, aw, sl, al = _pairs_same_prompt(spec)
    S = vt.scores(kind)
    d = S[sw, aw] - S[sl, al]
    bt_log_odds = log_expit(d) - log_expit(-d)
    if kind == "q":
        log_w = vt.log_z[sl] - vt.log_z[sw]
    else:
        p_ref = np.exp(vt.log_pi_ref)
        kl = np.array([exact_kl(p_ref[i], vt.pi_star[i]) for i in range(p_ref.shape[0])])
        log_w = kl[sl] - kl[sw]
    lhs = vt.log_pi_star[sw, aw] - vt.log_pi_star[sl, al]
    rhs = (vt.log_pi_ref[sw, aw] - vt.log_pi_ref[sl, al]) + bt_log_odds / beta + log_w
    return float(np.max(np.abs(lhs - rhs)))


def reconstruction_residuals(spec, beta):
    """Q and A rebuilt from ``pi*`` against the backward-induction tables."""
    vt = compute_values(spec, reference_policy(spec), beta)
    log_ratio = vt.log_pi_star - vt.log_pi_ref
    q_rec = beta * log_ratio + beta * vt.log_z[:, None]
    a_rec = beta * log_ratio + beta * vt.kl_star[:, None]
    return float(np.max(np.abs(q_rec - vt.q))), float(np.max(np.abs(a_rec - vt.adv)))


def constant_difference_spread(spec, gen, beta=0.1, kind="q", n_theta=10, seed=0):
    """Spread of ``D_h - L`` over random tabular policies under exact weights."""
    ref = reference_policy(spec)
    vt = compute_values(spec, ref, beta)
    batch = exact_pair_batch(spec, vt, kind)
    g = rng_mod.stream(seed, "constant-difference")
    diffs = []
    for _ in range(n_theta):
        pol = TabularPolicy(spec, g.standard_normal((spec.space.n_states, spec.vocab_size)))
        D = exact_bregman_divergence(spec, ref, None, pol, gen, beta, kind=kind, vt=vt, batch=batch)
        L = exact_expected_loss(spec, ref, None, pol, gen, beta, kind=kind, vt=vt, batch=batch)
        diffs.append(D - L)
    return float(np.ptp(diffs))


def dpo_residual(n_points=1000, beta=0.1, seed=0):
    """TBPO (logistic, unit weights, H=1) against twice the DPO logistic loss."""
    spec = MdpSpec(4, 1, seed=seed)
    ref = reference_policy(spec)
    V = spec.vocab_size
    aw, al = np.divmod(np.arange(V * V), V)
    zeros = np.zeros((V * V, 1), dtype=np.int64)
    batch = PairBatch(zeros, aw[:, None], zeros, al[:, None], np.ones((V * V, 1)))
    cfg = TrainConfig(generator=GeneratorSpec.logistic(), beta=beta)
    g = rng_mod.stream(seed, "dpo")
    worst = 0.0
    lr_ = ref.log_probs()[0]
    for _ in range(n_points):
        pol = TabularPolicy(spec, 3.0 * g.standard_normal((1, V)))
        res = batch_forward(cfg, pol, ref, batch, need_grad=False)
        lp = pol.log_probs()[0]
        margin = beta * ((lp[aw] - lr_[aw]) - (lp[al] - lr_[al]))
        dpo = -log_expit(margin)
        per_pair = 2.0 * np.logaddexp(0.0, res.log_r[:, 0])
        worst = max(worst, float(np.max(np.abs(per_pair - 2.0 * dpo))),
                    abs(res.loss - float(np.sum(2.0 * dpo))))
    return worst


def _random_dist(g, V, scale=1.0):
    z = scale * g.standard_normal(V)
    return np.exp(z - logsumexp(z))


def k3_checks(n_pairs=20, n=100_000, V=4, seed=0):
    """Returns ``(exact_error, worst_abs_z, min_summand)``."""
    spec = MdpSpec(V, 1, seed=seed)
    g = rng_mod.stream(seed, "k3-check")
    exact_err, worst_z, min_term = 0.0, 0.0, np.inf
    for i in range(n_pairs):
        p_ref, p_th = _random_dist(g, V), _random_dist(g, V)
        ref = TabularPolicy.from_log_probs(spec, np.log(p_ref)[None])
        pol = TabularPolicy.from_log_probs(spec, np.log(p_th)[None])
        kl = exact_kl(p_ref, p_th)
        exact_mode = float(np.sum(p_ref * _k3_terms(np.log(p_ref), np.log(p_th))))
        exact_err = max(exact_err, abs(exact_mode - kl))
        est = k3_kl(ref, pol, spec.space.states[0], rng_mod.stream(seed, "k3-sample", i), n)
        terms = _k3_terms(np.log(p_ref), np.log(p_th))
        sd = np.sqrt(np.sum(p_ref * (terms - kl) ** 2))
        worst_z = max(worst_z, abs(est - kl) / (sd / np.sqrt(n)))
        min_term = min(min_term, float(terms.min()))
    return exact_err, worst_z, min_term


def bregman_checks(n_grid=60):
    grid = np.geomspace(0.05, 20.0, n_grid)
    A, B = np.meshgrid(grid, grid, indexing="ij")
    worst_neg, worst_diag = 0.0, 0.0
    for gen in GENERATORS:
        D = bregman(gen, A, B)
        worst_neg = max(worst_neg, float(max(0.0, -D.min())))
        worst_diag = max(worst_diag, float(np.abs(np.diag(D)).max()))
    off = ~np.eye(n_grid, dtype=bool)
    strict = min(float(bregman(g, A, B)[off].min()) for g in GENERATORS)
    affine = float(np.max(np.abs(bregman(GeneratorSpec.sba(1.0, 1.0), A, B)
                                 - bregman(GeneratorSpec.lsif(), A, B))))
    return worst_neg, worst_diag, strict, affine


def grad_check_suite(spec, n_pairs=64, seed=0):
    """Worst relative error per (policy kind, generator, weight mode).

    K3 is checked with gradient flow through the baseline: the stop-gradient
    update is not the gradient of any scalar and has no finite-difference
    counterpart.
    """
    ref = reference_policy(spec)
    vt = compute_values(spec, ref, 0.1)
    out = {}
    for variant in ("q", "a"):
        ds = generate_dataset(spec, ref, vt, variant, n_pairs, seed=seed)
        batch = dataset_batch(spec, ds)
        batch = batch.subset(np.arange(len(batch)), 1.0 / len(batch))
        modes = [WeightMode("unit"), WeightMode(f"oracle_{variant}")]
        modes += [WeightMode("learned_head")] if variant == "q" else \
            [WeightMode("k3", k3_exact=True, k3_flow=True),
             WeightMode("k3", k3_samples=8, k3_flow=True)]
        for kind in ("tabular", "feedforward"):
            for gen in GRAD_GENERATORS:
                for mode in modes:
                    g = rng_mod.stream(seed, "gc-init", kind, gen.kind.value, mode.mode)
                    if kind == "tabular":
                        pol = TabularPolicy(spec, g.standard_normal((spec.space.n_states,
                                                                     spec.vocab_size)))
                        head = TabularHead(spec, g.standard_normal(spec.space.n_states))
                    else:
                        pol = FeedForwardPolicy(spec, 2, 8, seed=seed)
                        pol.restore(g.uniform(-1, 1, pol.n_params))
                        head = MlpHead(spec, 2, 8, seed=seed)
                        head.restore(g.uniform(-1, 1, head.n_params))
                    cfg = TrainConfig(variant=variant, generator=gen, weight_mode=mode)
                    ctx = WeightContext(vt=vt, head=head if mode.mode == "learned_head" else None)
                    err = grad_check(cfg, pol, ref, ctx, batch, seed=seed)
                    tag = mode.mode
                    if mode.mode == "k3":
                        tag += "-exact" if mode.k3_exact else "-sampled"
                    out[f"{kind}/{variant}/{tag}/{_gen_name(gen)}"] = err
    return out


def recovery_tv(spec, variant, mode=None, steps=4000, lr=5e-3, beta=0.1):
    ref = reference_policy(spec)
    vt = compute_values(spec, ref, beta)
    batch = exact_pair_batch(spec, vt, variant)
    mode = WeightMode(f"oracle_{variant}") if mode is None else mode
    cfg = TrainConfig(variant=variant, weight_mode=mode, beta=beta, epochs=steps,
                      policy_lr=lr, head_lr=1e-2, checkpoint_every=0)
    pol, _, rep = train(cfg, batch, spec, ref, vt)
    D = exact_bregman_divergence(spec, ref, None, pol, cfg.generator, beta, kind=variant,
                                 vt=vt, batch=batch)
    return tv_distance(pol, vt)[0], D, rep


def _check(name, residual, tol, detail=None):
    return {"name": name, "residual": float(residual), "tolerance": float(tol),
            "passed": bool(residual <= tol), "detail": detail or {}}


def run_verify(spec=None, tol_override=None, quick=False, log=None):
    """Run every check and return the report dict.

    ``spec`` replaces the default instance for the exact-enumeration checks;
    ``tol_override`` replaces every tolerance; ``quick`` skips training runs.
    """
    spec = default_spec() if spec is None else spec
    if spec.eos or spec.vocab_size ** spec.horizon > MAX_TRAJECTORIES:
        raise ConfigError(f"verify needs a fixed-horizon env with V**H <= {MAX_TRAJECTORIES}")
    checks = []
    t0 = time.perf_counter()

    def add(name, residual, tol, detail=None):
        c = _check(name, residual, tol if tol_override is None else tol_override, detail)
        checks.append(c)
        if log:
            log(c)

    mdps = [MdpSpec(V, H, seed=s, reward=TableReward(seed=s)) for V, H, s in IDENTITY_MDPS]
    for kind, label in (("q", "q_ratio_identity"), ("a", "a_ratio_identity")):
        res = max(identity_residual(m, b, kind) for m in mdps + [spec] for b in BETAS)
        add(label, res, 1e-9, {"mdps": len(mdps) + 1, "betas": list(BETAS)})
    rq = max(reconstruction_residuals(m, b)[0] for m in mdps + [spec] for b in BETAS)
    ra = max(reconstruction_residuals(m, b)[1] for m in mdps + [spec] for b in BETAS)
    add("q_reconstruction", rq, 1e-9)
    add("advantage_reconstruction", ra, 1e-9)
    for kind in ("q", "a"):
        for gen in GENERATORS:
            add(f"loss_divergence_constant_difference/{kind}/{_gen_name(gen)}",
                constant_difference_spread(spec, gen, kind=kind), 1e-8)
    ref = reference_policy(spec)
    for kind in ("q", "a"):
        vt = compute_values(spec, ref, 0.1)
        star = TabularPolicy.from_log_probs(spec, vt.log_pi_star)
        D = exact_bregman_divergence(spec, ref, None, star, GeneratorSpec.sba(), 0.1,
                                     weight_source=oracle_weight_base(vt, kind), kind=kind, vt=vt)
        add(f"divergence_zero_at_optimum/{kind}", abs(D), 1e-10)
    add("dpo_special_case", dpo_residual(), 1e-10)
    exact_err, worst_z, min_term = k3_checks()
    add("k3_exact_equals_kl", exact_err, 1e-12)
    add("k3_sampled_within_3se", worst_z, 3.0, {"n": 100_000, "pairs": 20})
    add("k3_summands_nonnegative", max(0.0, -min_term), 0.0)
    neg, diag, strict, affine = bregman_checks()
    add("bregman_nonnegative", neg, 0.0, {"min_off_diagonal": strict})
    add("bregman_zero_on_diagonal", diag, 1e-12)
    add("sba1_lsif_equivalence", affine, 1e-12)
    for name, err in grad_check_suite(spec).items():
        add(f"grad_check/{name}", err, 1e-4)
    if not quick:
        for variant in ("q", "a"):
            tv, D, _ = recovery_tv(spec, variant)
            add(f"optimum_recovery_tv/{variant}", tv, 0.02)
            add(f"optimum_recovery_divergence/{variant}", D, 1e-4)
    return {"spec_hash": spec.digest, "n_checks": len(checks),
            "all_passed": all(c["passed"] for c in checks),
            "seconds": round(time.perf_counter() - t0, 3), "checks": checks}
