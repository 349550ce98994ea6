"""The slicing MDP on top of the simulator.

Observation: per slice ``(T_rx, T_tx, U, D_vio, D_avg)`` normalised to
``[0, 1]``.  Action: a point on the simplex (softmax of policy logits),
rounded to integer RBG counts.  Reward: ``sum_i T_rx_i - penalty * D_vio_i``
on normalised throughput.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import SimConfig, SliceMetrics, reset_sim, step_sim


class EnvStateError(RuntimeError):
    """Environment used before :meth:`SlicingEnv.reset`."""


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 200
    violation_penalty: float = 4.0
    delay_norm_factor: float = 10.0  # D_avg is divided by this many delay thresholds


def action_to_allocation(shares, num_rbgs: int) -> list[int]:
    """Largest-remainder rounding of simplex shares to RBG counts summing to ``num_rbgs``."""
    shares = np.asarray(shares, dtype=float)
    exact = shares * num_rbgs
    counts = np.floor(exact).astype(int)
    # guard against shares summing to 1 + tiny
    counts = np.minimum(counts, num_rbgs)
    short = num_rbgs - int(counts.sum())
    if short > 0:
        rem = exact - counts
        # stable sort keeps lowest index first among equal remainders
        order = np.argsort(-rem, kind="stable")
        counts[order[:short]] += 1
    elif short < 0:
        order = np.argsort(exact - counts, kind="stable")
        for i in order:
            if short == 0:
                break
            if counts[i] > 0:
                counts[i] -= 1
                short += 1
    return counts.tolist()


def slice_ceilings(sim_config: SimConfig) -> np.ndarray:
    """Offered-load ceiling per slice (UE count times per-UE load), bit/s."""
    return np.array(sim_config.ues_per_slice, dtype=float) * sim_config.offered_load_per_ue


def _normalized_table(metrics: list[SliceMetrics], sim_config: SimConfig, env_config: EnvConfig) -> np.ndarray:
    ceil = slice_ceilings(sim_config)
    ceil = np.where(ceil > 0, ceil, 1.0)
    raw = np.array(
        [[m.rx_throughput, m.offered_load, m.utilization, m.delay_violation_rate, m.avg_delay] for m in metrics],
        dtype=float,
    )
    scale = np.empty_like(raw)
    scale[:, 0] = ceil
    scale[:, 1] = ceil
    scale[:, 2] = 1.0
    scale[:, 3] = 1.0
    scale[:, 4] = env_config.delay_norm_factor * sim_config.delay_threshold
    return np.clip(raw / scale, 0.0, 1.0)


def observe(metrics: list[SliceMetrics], sim_config: SimConfig, env_config: EnvConfig = EnvConfig()) -> np.ndarray:
    if len(metrics) != sim_config.num_slices:
        raise ValueError(f"expected {sim_config.num_slices} slice metrics, got {len(metrics)}")
    return _normalized_table(metrics, sim_config, env_config).reshape(-1)


def reward(metrics: list[SliceMetrics], sim_config: SimConfig, env_config: EnvConfig = EnvConfig()) -> float:
    table = _normalized_table(metrics, sim_config, env_config)
    return float(np.sum(table[:, 0] - env_config.violation_penalty * table[:, 3]))


class SlicingEnv:
    """Horizon-``T`` episodic wrapper around the simulator.

    Every episode starts from a freshly placed set of UEs.  Episode ``k``
    uses a simulator seed derived from ``(seed, k)``, so two environments
    built with the same seed see the same arrival and mobility streams
    regardless of the actions taken.
    """

    def __init__(self, sim_config: SimConfig, env_config: EnvConfig = EnvConfig(), seed: int = 0):
        self.sim_config = sim_config.validate()
        self.env_config = env_config
        self.seed = seed
        self.obs_dim = 5 * sim_config.num_slices
        self.action_dim = sim_config.num_slices
        self.state = None
        self.episode = 0
        self.t = 0
        self.last_metrics: list[SliceMetrics] | None = None
        self.observation = np.zeros(self.obs_dim)

    def _episode_seed(self) -> int:
        return int(np.random.SeedSequence([self.seed, self.episode]).generate_state(1)[0])

    def reset(self) -> np.ndarray:
        self.state = reset_sim(self.sim_config, self._episode_seed())
        self.t = 0
        self.observation = np.zeros(self.obs_dim)
        return self.observation

    def step(self, shares) -> tuple[np.ndarray, float, bool]:
        """Apply ``shares`` for one control interval; returns ``(s', r, done)``.

        ``done`` marks the horizon; the environment then resets itself and
        :attr:`observation` holds the state the next action should see.
        """
        if self.state is None:
            raise EnvStateError("call reset() before step()")
        alloc = action_to_allocation(shares, self.sim_config.num_rbgs)
        self.state, metrics = step_sim(self.state, alloc)
        self.last_metrics = metrics
        self.t += 1
        obs = observe(metrics, self.sim_config, self.env_config)
        r = reward(metrics, self.sim_config, self.env_config)
        done = self.t >= self.env_config.horizon
        self.observation = obs
        if done:
            # ``obs`` is still returned as s' for the stored transition; the
            # next decision is taken on a freshly reset simulator
            self.episode += 1
            self.reset()
        return obs, r, done
