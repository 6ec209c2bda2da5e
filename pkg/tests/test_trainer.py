import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from tbpo_lab import rng as rng_mod
from tbpo_lab.core_math import GeneratorSpec, pair_loss, per_token_loss, token_log_ratio
from tbpo_lab.errors import ConfigError
from tbpo_lab.oracle import (compute_values, exact_bregman_divergence, exact_expected_loss,
                             exact_pair_batch)
from tbpo_lab.policy import FeedForwardPolicy, TabularPolicy
from tbpo_lab.pref_data import PreferencePair, dataset_batch, generate_dataset
from tbpo_lab.token_mdp import StateId, state_space
from tbpo_lab.trainer import (OptimizerSpec, OptimizerState, TrainConfig, TrainState, batch_forward,
                              grad_check, make_policy, optimizer_step, pair_forward, train)
from tbpo_lab.verify import dpo_residual
from tbpo_lab.weights import MlpHead, TabularHead, WeightContext, WeightMode


@pytest.fixture
def env(small_spec, small_ref):
    vt = compute_values(small_spec, small_ref, 0.1)
    data = generate_dataset(small_spec, small_ref, vt, "q", 200, seed=0)
    return small_spec, small_ref, vt, data


def random_tabular(spec, seed):
    return TabularPolicy(spec, rng_mod.stream(seed, "pol").normal(size=(state_space(spec).n_states,
                                                                       spec.vocab_size)))


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.beta == 0.1
        assert cfg.generator == GeneratorSpec.sba(0.0, 4.0)
        assert cfg.optimizer.kind == "rmsprop" and cfg.policy_lr == 5e-3
        assert cfg.head_optimizer.kind == "adam" and cfg.head_lr == 1e-3

    def test_roundtrip(self):
        cfg = TrainConfig(variant="a", weight_mode=WeightMode("k3", 16, True), grad_clip=2.0)
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_rejects(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"variant": "q", "learning_rate": 1.0})
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(variant="a", weight_mode=WeightMode("learned_head"))
        with pytest.raises(ConfigError):
            TrainConfig(beta=0.0)


class TestPairForward:
    def test_reference_kliep(self, env):
        spec, ref, _, data = env
        cfg = TrainConfig(generator=GeneratorSpec.kliep())
        pair = data.pairs[0]
        loss, terms, head_terms = pair_forward(cfg, ref.copy(), ref, None, pair)
        assert loss == pytest.approx(1.0, abs=1e-14)
        T = 3
        np.testing.assert_allclose(np.abs([c for _, _, c in terms]), cfg.beta * 2 / T, rtol=1e-13)
        # rejected-side terms come first at each step and carry the positive sign
        assert all(c > 0 for _, _, c in terms[0::2]) and all(c < 0 for _, _, c in terms[1::2])
        assert head_terms == []

    def test_identical_responses_cancel(self, env):
        spec, ref, _, _ = env
        pol = random_tabular(spec, 1)
        pair = PreferencePair((), (0, 2, 1), (0, 2, 1), 0.5)
        for gen in (GeneratorSpec.logistic(), GeneratorSpec.lsif(), GeneratorSpec.sba(0.5, 4.0)):
            loss, _, _ = pair_forward(TrainConfig(generator=gen), pol, ref, None, pair)
            assert loss == pytest.approx(per_token_loss(gen, 0.0), abs=1e-15)

    def test_matches_pair_loss(self, env):
        spec, ref, _, data = env
        pol = random_tabular(spec, 2)
        cfg = TrainConfig()
        sp = state_space(spec)
        for pair in data.pairs[:20]:
            sw, sl = sp.path(0, pair.chosen), sp.path(0, pair.rejected)
            ratios = [token_log_ratio(pol.log_probs()[sw[t], pair.chosen[t]],
                                      pol.log_probs()[sl[t], pair.rejected[t]],
                                      ref.log_probs()[sw[t], pair.chosen[t]],
                                      ref.log_probs()[sl[t], pair.rejected[t]], 0.0, cfg.beta)
                      for t in range(3)]
            loss, _, _ = pair_forward(cfg, pol, ref, None, pair)
            assert loss == pytest.approx(pair_loss(cfg.generator, ratios), rel=1e-13)

    def test_terms_drive_accumulate_grad(self, env):
        spec, ref, _, data = env
        pol = random_tabular(spec, 3)
        cfg = TrainConfig(generator=GeneratorSpec.lsif())
        batch = dataset_batch(spec, replace(data, pairs=data.pairs[:1]))
        _, terms, _ = pair_forward(cfg, pol, ref, None, data.pairs[0])
        sink = pol.new_sink()
        pol.accumulate_grad(sink, terms)
        np.testing.assert_allclose(sink, batch_forward(cfg, pol, ref, batch).policy_grad, atol=1e-14)

    def test_head_terms(self, env):
        spec, ref, vt, data = env
        head = TabularHead(spec, np.arange(13.0) / 13)
        cfg = TrainConfig(weight_mode=WeightMode("learned_head"))
        _, terms, head_terms = pair_forward(cfg, ref.copy(), ref, WeightContext(head=head), data.pairs[0])
        assert len(head_terms) == 6
        np.testing.assert_allclose([c for _, c in head_terms], [c for _, _, c in terms])


class TestOptimizer:
    def test_rmsprop_example(self):
        st = OptimizerState(OptimizerSpec("rmsprop", decay=0.9, eps=1e-8), 1)
        new = optimizer_step(st, np.zeros(1), np.ones(1), 0.1)
        assert new[0] == pytest.approx(-0.1 / (math.sqrt(0.1) + 1e-8), abs=1e-15)
        assert new[0] == pytest.approx(-0.316228, abs=1e-6)

    def test_adam_first_step(self):
        st = OptimizerState(OptimizerSpec("adam"), 2)
        new = optimizer_step(st, np.zeros(2), np.array([3.0, -0.5]), 0.01)
        np.testing.assert_allclose(new, [-0.01, 0.01], rtol=1e-7)

    @pytest.mark.parametrize("kind", ["rmsprop", "adam"])
    def test_zero_gradient(self, kind):
        st = OptimizerState(OptimizerSpec(kind), 3)
        p = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(optimizer_step(st, p, np.zeros(3), 0.1), p)

    @pytest.mark.parametrize("kind", ["rmsprop", "adam"])
    def test_deterministic(self, kind):
        g = np.array([0.3, -1.2])
        a = optimizer_step(OptimizerState(OptimizerSpec(kind), 2), np.ones(2), g, 0.05)
        b = optimizer_step(OptimizerState(OptimizerSpec(kind), 2), np.ones(2), g, 0.05)
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            optimizer_step(OptimizerState(OptimizerSpec(), 2), np.ones(2), np.ones(3), 0.1)


class TestGradCheck:
    @pytest.mark.parametrize("mode", ["unit", "oracle_q"])
    def test_tabular(self, env, mode):
        spec, ref, vt, data = env
        cfg = TrainConfig(weight_mode=WeightMode(mode))
        assert grad_check(cfg, random_tabular(spec, 4), ref, WeightContext(vt=vt), data.pairs[:32]) <= 1e-4

    def test_feedforward(self, env):
        spec, ref, vt, data = env
        pol = FeedForwardPolicy(spec, 2, 8, seed=1)
        pol.restore(rng_mod.stream(1).uniform(-1, 1, pol.n_params))
        cfg = TrainConfig(generator=GeneratorSpec.logistic(), policy_kind="feedforward")
        assert grad_check(cfg, pol, ref, WeightContext(vt=vt), data.pairs[:32]) <= 1e-4

    @pytest.mark.parametrize("head_cls", [TabularHead, MlpHead])
    def test_learned_head_includes_head(self, env, head_cls):
        spec, ref, vt, data = env
        head = head_cls(spec)
        head.restore(rng_mod.stream(2).uniform(-1, 1, head.n_params))
        cfg = TrainConfig(weight_mode=WeightMode("learned_head"), generator=GeneratorSpec.kliep())
        err = grad_check(cfg, random_tabular(spec, 5), ref, WeightContext(head=head), data.pairs[:32],
                         n_coords=10_000)
        assert err <= 1e-4

    def test_detects_wrong_gradient(self, env, monkeypatch):
        spec, ref, vt, data = env
        import tbpo_lab.trainer as tr
        real = tr.per_token_loss_grad
        monkeypatch.setattr(tr, "per_token_loss_grad", lambda g, x: 1.5 * real(g, x))
        assert grad_check(TrainConfig(), random_tabular(spec, 6), ref, None, data.pairs[:8]) > 0.1


class TestBatchForward:
    def test_order_invariance(self, env):
        spec, ref, _, data = env
        pol = random_tabular(spec, 7)
        batch = dataset_batch(spec, data)
        perm = rng_mod.stream(0, "perm").permutation(len(batch))
        a = batch_forward(TrainConfig(), pol, ref, batch)
        b = batch_forward(TrainConfig(), pol, ref, batch.subset(perm))
        assert a.loss == pytest.approx(b.loss, abs=1e-10)
        np.testing.assert_allclose(a.policy_grad, b.policy_grad, atol=1e-10)

    def test_dpo_special_case(self):
        assert dpo_residual(n_points=200) <= 1e-10


class TestTrain:
    def test_zero_lr(self, env):
        spec, ref, vt, data = env
        cfg = TrainConfig(policy_lr=0.0, epochs=2, init_from_ref=True)
        init = make_policy(cfg, spec, ref).snapshot()
        pol, _, rep = train(cfg, data, spec, ref, vt)
        np.testing.assert_array_equal(pol.snapshot(), init)
        np.testing.assert_allclose(pol.log_probs(), ref.log_probs(), atol=1e-15)
        assert len(rep.rows) == 2

    def test_dataset_env_mismatch(self, env):
        spec, ref, vt, data = env
        with pytest.raises(ConfigError):
            train(TrainConfig(), replace(data, spec_hash="0" * 64), spec, ref, vt)

    def test_oracle_mode_needs_tables(self, env):
        spec, ref, _, data = env
        with pytest.raises(ConfigError):
            train(TrainConfig(weight_mode=WeightMode("oracle_q")), data, spec, ref)

    def test_divergence_abort(self, env):
        spec, ref, vt, data = env
        _, _, rep = train(TrainConfig(policy_lr=1e3, epochs=3), data, spec, ref, vt)
        assert rep.aborted and rep.abort_step is not None

    def test_non_finite_abort_records_pair(self, env):
        spec, ref, vt, data = env
        batch = dataset_batch(spec, data)
        batch.weight[17, 1] = np.nan
        cfg = TrainConfig(batch_size=len(batch))
        _, _, rep = train(cfg, batch, spec, ref, vt)
        assert rep.aborted
        assert rep.abort_step == 0 and rep.abort_pair == 17

    def test_resume_matches_straight_run(self, env, tmp_path):
        spec, ref, vt, data = env
        cfg = TrainConfig(epochs=2, batch_size=16, weight_mode=WeightMode("learned_head"))
        pol_a, head_a, _ = train(cfg, data, spec, ref, vt)
        one = replace(cfg, epochs=1)
        st = TrainState(one, spec, TabularPolicy(spec), TabularHead(spec))
        train(one, data, spec, ref, vt, state=st, out_dir=str(tmp_path))
        saved = json.loads((tmp_path / "ckpt_epoch1.json").read_text())
        st2 = TrainState.from_checkpoint(one, spec, saved)
        pol_b, head_b, _ = train(one, data, spec, ref, vt, state=st2)
        np.testing.assert_array_equal(pol_a.snapshot(), pol_b.snapshot())
        np.testing.assert_array_equal(head_a.snapshot(), head_b.snapshot())
        assert st2.epoch == 2

    def test_head_moves(self, env):
        spec, ref, vt, data = env
        cfg = TrainConfig(weight_mode=WeightMode("learned_head"), epochs=1)
        _, head, _ = train(cfg, data, spec, ref, vt)
        assert np.any(head.snapshot() != 0)

    def test_csv(self, env, tmp_path):
        spec, ref, vt, data = env
        _, _, rep = train(TrainConfig(epochs=2), data, spec, ref, vt)
        path = tmp_path / "log.csv"
        rep.write_csv(path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["epoch", "step", "loss", "grad_norm", "mean_abs_logR", "tv_to_oracle",
                           "seconds"]
        assert len(rows) == 3

    def test_monotone_at_small_lr(self, small_spec, small_ref):
        vt = compute_values(small_spec, small_ref, 0.1)
        batch = exact_pair_batch(small_spec, vt, "q")
        cfg = TrainConfig(weight_mode=WeightMode("oracle_q"), epochs=50, policy_lr=1e-3)
        _, _, rep = train(cfg, batch, small_spec, small_ref, vt)
        losses = [r["loss"] for r in rep.rows]
        assert np.all(np.diff(losses) <= 1e-12)

    def test_constant_difference_along_training(self, small_spec, small_ref):
        vt = compute_values(small_spec, small_ref, 0.1)
        batch = exact_pair_batch(small_spec, vt, "q")
        cfg = TrainConfig(weight_mode=WeightMode("oracle_q"), epochs=30, policy_lr=2e-2)
        st = TrainState(cfg, small_spec, TabularPolicy(small_spec), None)
        diffs = []
        for _ in range(10):
            train(cfg, batch, small_spec, small_ref, vt, state=st)
            args = (small_spec, small_ref, None, st.policy, cfg.generator, cfg.beta)
            diffs.append(exact_bregman_divergence(*args, vt=vt, batch=batch)
                         - exact_expected_loss(*args, vt=vt, batch=batch))
        assert np.ptp(diffs) <= 1e-8

    def test_state_id_terms_are_state_ids(self, env):
        spec, ref, _, data = env
        _, terms, _ = pair_forward(TrainConfig(), ref.copy(), ref, None, data.pairs[0])
        assert all(isinstance(s, StateId) for s, _, _ in terms)
