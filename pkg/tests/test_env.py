import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import largest_remainder
from ranslice.env import EnvConfig, EnvStateError, SlicingEnv, action_to_allocation, observe, reward
from ranslice.nn import softmax
from ranslice.sim import SimConfig, SliceMetrics

CFG = SimConfig(ues_per_slice=(8, 12, 16))


def metrics(rx=(0, 0, 0), tx=(0, 0, 0), u=(0, 0, 0), vio=(0, 0, 0), davg=(0, 0, 0)):
    return [SliceMetrics(*vals, 0, 0) for vals in zip(rx, tx, u, vio, davg)]


class TestAllocation:
    @pytest.mark.parametrize(
        "shares, expected",
        [((1 / 3, 1 / 3, 1 / 3), [9, 8, 8]), ((1, 0, 0), [25, 0, 0]), ((0.5, 0.5, 0), [13, 12, 0])],
    )
    def test_examples(self, shares, expected):
        assert action_to_allocation(shares, 25) == expected
        assert largest_remainder(shares, 25) == expected

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6).filter(lambda v: sum(v) > 1e-3),
           st.integers(1, 60))
    def test_legal_and_matches_oracle(self, raw, m):
        shares = np.array(raw) / sum(raw)
        counts = action_to_allocation(shares, m)
        assert sum(counts) == m
        assert all(np.floor(s * m) - 1e-9 <= c <= np.ceil(s * m) + 1e-9 for s, c in zip(shares, counts))
        assert counts == largest_remainder(list(shares), m)

    def test_large_logit_concentrates(self):
        for i in range(3):
            z = np.zeros(3)
            z[i] = 60.0
            alloc = action_to_allocation(softmax(z), 25)
            assert alloc[i] == 25 and sum(alloc) == 25


class TestObserveReward:
    def test_zero_metrics(self):
        assert np.all(observe(metrics(), CFG) == 0.0)
        assert observe(metrics(), CFG).shape == (15,)

    def test_ceiling_maps_to_one(self):
        ceil = np.array(CFG.ues_per_slice) * CFG.offered_load_per_ue
        obs = observe(metrics(rx=ceil, tx=ceil * 2), CFG)
        assert np.all(obs.reshape(3, 5)[:, 0] == 1.0)
        assert np.all(obs.reshape(3, 5)[:, 1] == 1.0)

    def test_random_against_table(self, rng):
        env_cfg = EnvConfig()
        ceil = np.array(CFG.ues_per_slice) * CFG.offered_load_per_ue
        for _ in range(100):
            raw = rng.uniform(0, 1.5, (3, 5)) * np.array([ceil.max(), ceil.max(), 1, 1, 1.5])
            m = metrics(*raw.T)
            want = []
            for i in range(3):
                rx, tx, u, vio, d = raw[i]
                want += [min(max(rx / ceil[i], 0), 1), min(max(tx / ceil[i], 0), 1), min(max(u, 0), 1),
                         min(max(vio, 0), 1), min(max(d / (10 * CFG.delay_threshold), 0), 1)]
            np.testing.assert_allclose(observe(m, CFG, env_cfg), want, rtol=0, atol=1e-15)

    def test_reward_examples(self):
        ceil = np.array(CFG.ues_per_slice) * CFG.offered_load_per_ue
        assert reward(metrics(rx=ceil), CFG) == 3.0
        assert reward(metrics(rx=(0.5 * ceil[0], 0, 0), vio=(0.25, 0, 0)), CFG) == pytest.approx(-0.5)

    def test_reward_random_against_scalar_sum(self, rng):
        ceil = np.array(CFG.ues_per_slice) * CFG.offered_load_per_ue
        for _ in range(100):
            rx = rng.uniform(0, 1.2, 3) * ceil
            vio = rng.uniform(0, 1, 3)
            want = 0.0
            for i in range(3):
                want += min(rx[i] / ceil[i], 1.0) - 4.0 * vio[i]
            r = reward(metrics(rx=rx, vio=vio), CFG)
            assert r == pytest.approx(want, abs=1e-12)
            assert -12.0 <= r <= 3.0


class TestEnvStep:
    def test_uninitialised(self):
        env = SlicingEnv(CFG, EnvConfig(horizon=5))
        with pytest.raises(EnvStateError):
            env.step([1 / 3] * 3)

    def test_horizon_and_reset(self):
        env = SlicingEnv(CFG, EnvConfig(horizon=200), seed=1)
        env.reset()
        dones = [env.step([1 / 3] * 3)[2] for _ in range(200)]
        assert dones == [False] * 199 + [True]
        assert env.t == 0 and env.episode == 1 and env.state.step_count == 0
        env.step([1 / 3] * 3)
        assert env.t == 1 and env.state.step_count == 1
        assert np.all(env.observation >= 0)

    def test_episode_length_and_reward_accumulation(self):
        env = SlicingEnv(CFG, EnvConfig(horizon=7), seed=2)
        env.reset()
        rng = np.random.default_rng(0)
        total, recomputed, dones = 0.0, 0.0, []
        for _ in range(21):
            obs, r, done = env.step(rng.dirichlet(np.ones(3)))
            total += r
            recomputed += reward(env.last_metrics, CFG)
            dones.append(done)
            assert obs.shape == (15,) and np.all((obs >= 0) & (obs <= 1))
        assert total == pytest.approx(recomputed)
        assert [i for i, d in enumerate(dones) if d] == [6, 13, 20]

    def test_same_seed_same_stream(self):
        def run():
            env = SlicingEnv(CFG, EnvConfig(horizon=4), seed=3)
            env.reset()
            return [env.step([0.2, 0.3, 0.5])[1] for _ in range(10)]

        assert run() == run()
