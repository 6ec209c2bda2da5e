import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbpo_lab import rng as rng_mod
from tbpo_lab.errors import ConfigError, DomainError
from tbpo_lab.policy import TabularPolicy
from tbpo_lab.token_mdp import (MdpSpec, StateId, TableReward, TargetStringReward, Trajectory,
                                enumerate_states, enumerate_trajectories, reward, rollout,
                                state_space, total_reward)


class TestMdpSpec:
    @pytest.mark.parametrize("V,H", [(1, 2), (17, 2), (2, 0), (2, 9), (100, 3)])
    def test_bounds(self, V, H):
        with pytest.raises(ConfigError):
            MdpSpec(V, H)

    def test_prompt_validation(self):
        with pytest.raises(ConfigError):
            MdpSpec(2, 2, prompts=(((0,), 0.0),))
        with pytest.raises(ConfigError):
            MdpSpec(2, 2, prompts=(((5,), 1.0),))
        with pytest.raises(ConfigError):
            MdpSpec(2, 2, prompts=())

    def test_target_validation(self):
        with pytest.raises(ConfigError):
            MdpSpec(2, 3, reward=TargetStringReward((0, 1)))
        with pytest.raises(ConfigError):
            MdpSpec(2, 2, reward=TargetStringReward((0, 2)))

    def test_json_roundtrip(self):
        spec = MdpSpec(3, 2, prompts=(((), 1.0), ((1, 2), 3.0)), reward=TableReward(7, 0.5), seed=11)
        back = MdpSpec.from_json(spec.to_json())
        assert back == spec
        assert back.digest == spec.digest

    def test_digest_changes(self):
        assert MdpSpec(3, 2).digest != MdpSpec(3, 2, seed=1).digest

    def test_malformed(self):
        with pytest.raises(ConfigError):
            MdpSpec.from_dict({"vocab_size": 2})


class TestEnumerateStates:
    def test_v2_h2(self):
        states = enumerate_states(MdpSpec(2, 2))
        assert states == [StateId(0, ()), StateId(0, (0,)), StateId(0, (1,))]

    def test_counts(self):
        assert len(enumerate_states(MdpSpec(3, 3))) == 13
        assert len(enumerate_states(MdpSpec(2, 2, prompts=(((), 1.0), ((1,), 1.0))))) == 6
        assert len(enumerate_states(MdpSpec(4, 4))) == 85

    def test_ordering(self):
        states = enumerate_states(MdpSpec(2, 3, prompts=(((), 1.0), ((1,), 1.0))))
        keys = [(s.prompt_index, len(s.prefix), s.prefix) for s in states]
        assert keys == sorted(keys)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 5), st.integers(1, 4))
    def test_bijection_onto_prefix_tree(self, V, H):
        sp = state_space(MdpSpec(V, H))
        assert sp.n_states == sum(V ** t for t in range(H))
        assert len(set(sp.states)) == sp.n_states
        for i, s in enumerate(sp.states):
            for a in range(V):
                c = sp.child[i, a]
                if len(s.prefix) < H - 1:
                    assert sp.states[c] == StateId(0, s.prefix + (a,))
                else:
                    assert c == -1


class TestReward:
    def test_target_string(self):
        spec = MdpSpec(2, 2, reward=TargetStringReward((1, 0), 1.0, 0.0))
        assert reward(spec, StateId(0, ()), 1) == 1.0
        assert reward(spec, StateId(0, (1,)), 1) == 0.0

    def test_table_is_stable(self):
        spec = MdpSpec(3, 3, reward=TableReward(7, 1.0))
        s = StateId(0, (2, 1))
        first = reward(spec, s, 0)
        state_space.cache_clear()
        assert reward(MdpSpec(3, 3, reward=TableReward(7, 1.0)), s, 0) == first

    def test_table_draws_from_seeded_stream(self):
        spec = MdpSpec(3, 2, reward=TableReward(7, 2.0))
        expected = 2.0 * rng_mod.stream(7, "reward", 0).standard_normal((4, 3))
        np.testing.assert_array_equal(state_space(spec).rewards, expected)

    def test_out_of_range(self):
        spec = MdpSpec(2, 2)
        with pytest.raises(DomainError):
            reward(spec, StateId(0, ()), 2)
        with pytest.raises(DomainError):
            reward(spec, StateId(0, (0, 0)), 0)


class TestRollout:
    def test_deterministic_policy(self):
        spec = MdpSpec(3, 4)
        logits = np.full((state_space(spec).n_states, 3), -50.0)
        logits[:, 0] = 50.0
        traj = rollout(spec, TabularPolicy(spec, logits), 0, rng_mod.stream(0))
        assert traj.tokens == (0, 0, 0, 0)

    def test_reproducible(self):
        spec = MdpSpec(2, 4)
        pol = TabularPolicy(spec)
        a = rollout(spec, pol, 0, rng_mod.stream(3, "x"))
        b = rollout(spec, pol, 0, rng_mod.stream(3, "x"))
        assert a == b

    def test_consumes_h_draws(self):
        spec = MdpSpec(2, 4)
        g = rng_mod.stream(5)
        rollout(spec, TabularPolicy(spec), 0, g)
        ref = rng_mod.stream(5)
        ref.random(4)
        assert g.random() == ref.random()

    def test_uniform_frequency(self):
        spec = MdpSpec(2, 1)
        g = rng_mod.stream(1)
        n = 100_000
        hits = sum(rollout(spec, TabularPolicy(spec), 0, g).tokens[0] == 0 for _ in range(n))
        assert abs(hits / n - 0.5) <= 3 * np.sqrt(0.25 / n)

    def test_policy_mismatch(self):
        with pytest.raises(DomainError):
            rollout(MdpSpec(2, 2), TabularPolicy(MdpSpec(2, 3)), 0, rng_mod.stream(0))


class TestEosMode:
    def test_truncated_at_eos(self):
        spec = MdpSpec(3, 4, eos=True)
        logits = np.full((state_space(spec).n_states, 3), -50.0)
        logits[:, 2] = 50.0
        traj = rollout(spec, TabularPolicy(spec, logits), 0, rng_mod.stream(0))
        assert traj.tokens == (2,)

    def test_no_children_after_eos(self):
        sp = state_space(MdpSpec(3, 3, eos=True))
        assert np.all(sp.child[:, 2] == -1)
        assert sp.n_states == 1 + 2 + 4


class TestTrajectories:
    def test_enumeration_shape(self):
        spec = MdpSpec(3, 2)
        states, acts = enumerate_trajectories(spec, 0)
        assert acts.shape == (9, 2)
        assert len({tuple(r) for r in acts}) == 9
        sp = state_space(spec)
        for s_row, a_row in zip(states, acts):
            assert list(s_row) == sp.path(0, a_row)

    def test_total_reward(self):
        spec = MdpSpec(2, 2, reward=TargetStringReward((1, 0), 1.0, 0.0))
        assert total_reward(spec, Trajectory(0, (1, 0))) == 2.0
        assert total_reward(spec, Trajectory(0, (0, 0))) == 1.0
