"""Off-policy soft actor-critic in two flavours.

``mode="discounted"``: the usual soft Bellman target with discount ``gamma``.

``mode="average"``: average-reward SAC.  The discount disappears from the
critic target and a trainable scalar ``rho`` (the reward-rate estimate) is
subtracted from every reward instead; ``rho`` follows its own SGD step on
the squared residual ``r - rho - min(Q1, Q2)(s, a)``.

Both modes share the replay buffer, twin critics, target networks, and the
reparameterised actor step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import AdamState, MlpSpec

log = logging.getLogger(__name__)

MODES = ("discounted", "average")
LOG_FIELDS = [
    "env_step",
    "episode",
    "cumulative_reward",
    "avg_reward_per_step",
    "rho",
    "rho_emp",
    "critic_loss",
    "actor_loss",
]


class ModeError(RuntimeError):
    """Operation called on an agent in the wrong mode."""


@dataclass(frozen=True)
class AgentConfig:
    mode: str = "discounted"
    gamma: float = 0.99
    hidden_sizes: tuple[int, ...] = (256, 256)
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_rho: float = 1e-5
    tau: float = 0.005
    c_ent: float = 0.05
    batch_size: int = 256
    buffer_capacity: int = 100_000
    warmup: int = 1000
    updates_per_step: int = 1
    actor_grad: str = "reparam"  # or "likelihood_ratio"
    entropy_in_target: bool = True
    rho_residual: str = "direct"  # or "td"
    rho_init: float = 0.0
    rate_mix: float = 0.1  # mixing coefficient of the diagnostic rate tracker

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "discounted" and not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.actor_grad not in ("reparam", "likelihood_ratio"):
            raise ValueError(f"unknown actor_grad {self.actor_grad!r}")
        if self.rho_residual not in ("direct", "td"):
            raise ValueError(f"unknown rho_residual {self.rho_residual!r}")


# ---------------------------------------------------------------- replay


@dataclass
class Transition:
    obs: np.ndarray
    logits: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool


@dataclass
class Batch:
    obs: np.ndarray
    logits: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.reward)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int, warmup: int = 0):
        self.capacity = int(capacity)
        self.warmup = int(warmup)
        self.obs = np.zeros((capacity, obs_dim))
        self.logits = np.zeros((capacity, action_dim))
        self.action = np.zeros((capacity, action_dim))
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> "ReplayBuffer":
        i = self.cursor
        self.obs[i] = t.obs
        self.logits[i] = t.logits
        self.action[i] = t.action
        self.reward[i] = t.reward
        self.next_obs[i] = t.next_obs
        self.done[i] = t.done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return self

    def get(self, i: int) -> Transition:
        """The ``i``-th oldest stored transition."""
        if not 0 <= i < self.size:
            raise IndexError(i)
        j = (self.cursor - self.size + i) % self.capacity
        return Transition(self.obs[j].copy(), self.logits[j].copy(), self.action[j].copy(),
                          float(self.reward[j]), self.next_obs[j].copy(), bool(self.done[j]))

    def ready(self, batch_size: int) -> bool:
        return self.size >= max(batch_size, self.warmup, 1)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray | None:
        if not self.ready(batch_size):
            return None
        return rng.integers(0, self.size, batch_size)

    def sample_minibatch(self, batch_size: int, rng: np.random.Generator) -> Batch | None:
        """Uniform draw with replacement; ``None`` while below the warmup threshold."""
        idx = self.sample_indices(batch_size, rng)
        if idx is None:
            return None
        # slot index for the i-th oldest item
        idx = (self.cursor - self.size + idx) % self.capacity
        return Batch(self.obs[idx], self.logits[idx], self.action[idx], self.reward[idx],
                     self.next_obs[idx], self.done[idx])


def push(buffer: ReplayBuffer, t: Transition) -> ReplayBuffer:
    return buffer.push(t)


def sample_minibatch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Batch | None:
    return buffer.sample_minibatch(batch_size, rng)


# ---------------------------------------------------------------- agent


@dataclass
class AgentState:
    config: AgentConfig
    actor_spec: MlpSpec
    critic_spec: MlpSpec
    actor: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    q1_targ: np.ndarray
    q2_targ: np.ndarray
    actor_opt: AdamState
    q1_opt: AdamState
    q2_opt: AdamState
    rng: np.random.Generator
    rho: float = 0.0
    rho_steps: int = 0

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def gamma(self) -> float:
        return self.config.gamma

    @property
    def tau(self) -> float:
        return self.config.tau

    @property
    def c_ent(self) -> float:
        return self.config.c_ent

    def networks(self) -> dict[str, np.ndarray]:
        return {"actor": self.actor, "q1": self.q1, "q2": self.q2, "q1_targ": self.q1_targ, "q2_targ": self.q2_targ}

    def specs(self) -> dict[str, MlpSpec]:
        return {"actor": self.actor_spec, "q1": self.critic_spec, "q2": self.critic_spec,
                "q1_targ": self.critic_spec, "q2_targ": self.critic_spec}


def make_agent(config: AgentConfig, obs_dim: int, action_dim: int, seed: int) -> AgentState:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    actor_spec = MlpSpec((obs_dim, *config.hidden_sizes, 2 * action_dim))
    critic_spec = MlpSpec((obs_dim + action_dim, *config.hidden_sizes, 1))
    actor = nn.init_params(actor_spec, rng, out_scale=0.01)
    q1 = nn.init_params(critic_spec, rng)
    q2 = nn.init_params(critic_spec, rng)
    return AgentState(
        config=config,
        actor_spec=actor_spec,
        critic_spec=critic_spec,
        actor=actor,
        q1=q1,
        q2=q2,
        q1_targ=q1.copy(),
        q2_targ=q2.copy(),
        actor_opt=AdamState.zeros(actor.size, lr=config.lr_actor),
        q1_opt=AdamState.zeros(q1.size, lr=config.lr_critic),
        q2_opt=AdamState.zeros(q2.size, lr=config.lr_critic),
        rng=rng,
        rho=float(config.rho_init),
    )


def critic_input(obs: np.ndarray, action: np.ndarray) -> np.ndarray:
    return np.concatenate([obs, action], axis=-1)


def min_q(agent: AgentState, obs, action, target: bool = False) -> np.ndarray:
    p1, p2 = (agent.q1_targ, agent.q2_targ) if target else (agent.q1, agent.q2)
    x = critic_input(obs, action)
    q1 = nn.mlp_forward(p1, agent.critic_spec, x)[..., 0]
    q2 = nn.mlp_forward(p2, agent.critic_spec, x)[..., 0]
    return np.minimum(q1, q2)


def _next_action_terms(batch: Batch, agent: AgentState, target: bool = True):
    nxt = nn.policy_sample(agent.actor, agent.actor_spec, batch.next_obs, agent.rng)
    q_next = min_q(agent, batch.next_obs, nxt.action, target=target)
    ent = agent.c_ent * nxt.log_prob if agent.config.entropy_in_target else 0.0
    return q_next, ent


def soft_value_target(reward, min_q_next, log_prob_next, c_ent, *, gamma=None, rho=None) -> np.ndarray:
    """``r + gamma * (minQ' - c*logpi')`` or, with ``rho``, ``r - rho + minQ' - c*logpi'``."""
    if (gamma is None) == (rho is None):
        raise ModeError("pass exactly one of gamma / rho")
    soft_next = np.asarray(min_q_next) - c_ent * np.asarray(log_prob_next)
    if gamma is not None:
        return np.asarray(reward) + gamma * soft_next
    return np.asarray(reward) - rho + soft_next


def target_discounted(batch: Batch, agent: AgentState) -> np.ndarray:
    # done is deliberately not used: the reset is an episode marker in a continuing task
    if agent.mode != "discounted":
        raise ModeError("target_discounted needs a discounted-mode agent")
    q_next, ent = _next_action_terms(batch, agent)
    return batch.reward + agent.gamma * (q_next - ent)


def target_average(batch: Batch, agent: AgentState) -> np.ndarray:
    if agent.mode != "average":
        raise ModeError("target_average needs an average-mode agent")
    q_next, ent = _next_action_terms(batch, agent)
    return batch.reward - agent.rho + q_next - ent


def compute_targets(batch: Batch, agent: AgentState) -> np.ndarray:
    if agent.mode == "average":
        return target_average(batch, agent)
    return target_discounted(batch, agent)


def critic_loss_and_grads(agent: AgentState, batch: Batch, y: np.ndarray):
    """Mean squared error of each critic to the fixed targets ``y`` and its gradient."""
    x = critic_input(batch.obs, batch.action)
    out = []
    for params in (agent.q1, agent.q2):
        q, cache = nn.forward_with_cache(params, agent.critic_spec, x)
        err = q[:, 0] - y
        grad, _ = nn.backward(params, agent.critic_spec, x, (2.0 / len(y)) * err[:, None], cache=cache)
        out.append((float(np.mean(err * err)), grad))
    return out


def critic_update(batch: Batch, agent: AgentState, y: np.ndarray | None = None) -> float:
    """One Adam step for both critics toward the soft target; returns the mean loss."""
    if y is None:
        y = compute_targets(batch, agent)
    (l1, g1), (l2, g2) = critic_loss_and_grads(agent, batch, y)
    nn.adam_update(agent.q1, g1, agent.q1_opt)
    nn.adam_update(agent.q2, g2, agent.q2_opt)
    return 0.5 * (l1 + l2)


def actor_loss_and_grad(agent: AgentState, batch: Batch):
    obs = batch.obs
    n = len(obs)
    pol = nn.policy_sample(agent.actor, agent.actor_spec, obs, agent.rng)
    x = critic_input(obs, pol.action)
    q1, c1 = nn.forward_with_cache(agent.q1, agent.critic_spec, x)
    q2, c2 = nn.forward_with_cache(agent.q2, agent.critic_spec, x)
    q1, q2 = q1[:, 0], q2[:, 0]
    use1 = q1 <= q2
    q = np.where(use1, q1, q2)
    c = agent.c_ent
    if agent.config.actor_grad == "likelihood_ratio":
        loss = float(np.mean(-pol.log_prob * q))
        grad = nn.policy_score_backward(agent.actor, agent.actor_spec, obs, pol, -q / n)
        return loss, grad
    loss = float(np.mean(c * pol.log_prob - q))
    # d loss / d Q = -1/n, routed through whichever critic is the min
    up1 = np.where(use1, -1.0 / n, 0.0)[:, None]
    up2 = np.where(use1, 0.0, -1.0 / n)[:, None]
    _, gx1 = nn.backward(agent.q1, agent.critic_spec, x, up1, cache=c1, want_params=False)
    _, gx2 = nn.backward(agent.q2, agent.critic_spec, x, up2, cache=c2, want_params=False)
    k = obs.shape[1]
    grad_a = gx1[:, k:] + gx2[:, k:]
    grad_z = nn.softmax_vjp(pol.action, grad_a)
    grad = nn.policy_backward(agent.actor, agent.actor_spec, obs, pol, grad_z, np.full(n, c / n))
    return loss, grad


def actor_update(batch: Batch, agent: AgentState) -> float:
    """One Adam step descending ``mean(c*logpi - minQ)`` (i.e. ascending the soft value)."""
    loss, grad = actor_loss_and_grad(agent, batch)
    nn.adam_update(agent.actor, grad, agent.actor_opt)
    return loss


def rho_residual(batch: Batch, agent: AgentState) -> np.ndarray:
    """``r - rho - minQ(s, a)``, or the one-step TD form when ``rho_residual='td'``."""
    eps = batch.reward - agent.rho - min_q(agent, batch.obs, batch.action)
    if agent.config.rho_residual == "td":
        nxt = nn.policy_sample(agent.actor, agent.actor_spec, batch.next_obs, agent.rng)
        eps = eps + min_q(agent, batch.next_obs, nxt.action)
    return eps


def rho_update(batch: Batch, agent: AgentState) -> float:
    """SGD step on ``mean(eps**2)`` w.r.t. ``rho``: ``rho += lr * 2 * mean(eps)``."""
    if agent.mode != "average":
        raise ModeError("rho_update needs an average-mode agent")
    eps = rho_residual(batch, agent)
    agent.rho = agent.rho + agent.config.lr_rho * 2.0 * float(np.mean(eps))
    agent.rho_steps += 1
    return agent.rho


def polyak_update(agent: AgentState) -> AgentState:
    tau = agent.tau
    for targ, src in ((agent.q1_targ, agent.q1), (agent.q2_targ, agent.q2)):
        targ *= 1.0 - tau
        targ += tau * src
    return agent


@dataclass
class RateTracker:
    """Exponentially mixed per-step reward rate; a diagnostic, never fed back."""

    mix: float = 0.1
    value: float | None = None

    def update(self, rewards) -> float:
        rewards = np.asarray(rewards, dtype=float)
        if rewards.size == 0:
            raise ValueError("empty reward list")
        m = float(rewards.mean())
        # first batch initialises the estimate instead of mixing with an arbitrary prior
        self.value = m if self.value is None else (1.0 - self.mix) * self.value + self.mix * m
        return self.value


def empirical_rate_update(tracker: RateTracker, episode_rewards) -> RateTracker:
    tracker.update(episode_rewards)
    return tracker


def update_step(batch: Batch, agent: AgentState) -> tuple[float, float]:
    """Critic, actor, rho (average mode), then target networks."""
    c_loss = critic_update(batch, agent)
    a_loss = actor_update(batch, agent)
    if agent.mode == "average":
        rho_update(batch, agent)
    polyak_update(agent)
    return c_loss, a_loss


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    curve: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    rate: RateTracker | None = None


def save_agent(agent: AgentState, path, env_step: int) -> Path:
    meta = {"agent_config": asdict(agent.config), "rho": agent.rho, "env_step": env_step}
    nn.save_checkpoint(path, agent.networks(), agent.specs(), meta)
    return Path(path)


def train(env, agent: AgentState, total_steps: int, *, seed: int = 0, checkpoint_dir=None,
          log_path=None, checkpoint_every: int = 0) -> TrainResult:
    """Run the act / store / update loop for ``total_steps`` environment steps.

    One row is logged per finished episode.  In discounted mode the ``rho``
    column is left empty.  Checkpoints: the initial parameters, every
    ``checkpoint_every`` steps if set, and the final parameters.
    """
    cfg = agent.config
    buffer = ReplayBuffer(cfg.buffer_capacity, env.obs_dim, env.action_dim, warmup=cfg.warmup)
    sample_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    tracker = RateTracker(cfg.rate_mix)
    result = TrainResult(rate=tracker)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    def checkpoint(step):
        if ckdir is not None:
            result.checkpoints.append(save_agent(agent, ckdir / f"step_{step:08d}.npz", step))
        else:
            result.snapshots.append({k: v.copy() for k, v in agent.networks().items()} | {"env_step": step})

    checkpoint(0)
    obs = env.reset()
    ep_rewards: list[float] = []
    c_losses: list[float] = []
    a_losses: list[float] = []
    episode = 0
    for step in range(1, total_steps + 1):
        try:
            pol = nn.policy_sample(agent.actor, agent.actor_spec, obs, agent.rng)
            next_obs, r, done = env.step(pol.action)
            buffer.push(Transition(obs, pol.z, pol.action, r, next_obs, done))
            ep_rewards.append(r)
            for _ in range(cfg.updates_per_step):
                batch = buffer.sample_minibatch(cfg.batch_size, sample_rng)
                if batch is None:
                    break
                c, a = update_step(batch, agent)
                c_losses.append(c)
                a_losses.append(a)
        except Exception as exc:
            raise RuntimeError(f"training aborted at env step {step}: {exc}") from exc
        if not np.isfinite(agent.rho):
            raise RuntimeError(f"training aborted at env step {step}: rho diverged")
        obs = next_obs
        if done:
            episode += 1
            tracker.update(ep_rewards)
            result.curve.append({
                "env_step": step,
                "episode": episode,
                "cumulative_reward": float(np.sum(ep_rewards)),
                "avg_reward_per_step": float(np.mean(ep_rewards)),
                "rho": agent.rho if cfg.mode == "average" else None,
                "rho_emp": tracker.value,
                "critic_loss": float(np.mean(c_losses)) if c_losses else None,
                "actor_loss": float(np.mean(a_losses)) if a_losses else None,
            })
            log.debug("episode %d step %d reward %.3f", episode, step, result.curve[-1]["cumulative_reward"])
            ep_rewards, c_losses, a_losses = [], [], []
            obs = env.observation
        if checkpoint_every and step % checkpoint_every == 0 and step != total_steps:
            checkpoint(step)
    if total_steps > 0:
        checkpoint(total_steps)
    if log_path is not None:
        write_log(result.curve, log_path)
    return result


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in LOG_FIELDS])


def read_log(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for lineno, raw in enumerate(reader, start=2):
            try:
                row = {k: (None if raw[k] in ("", None) else float(raw[k])) for k in LOG_FIELDS}
                row["env_step"] = int(row["env_step"])
                row["episode"] = int(row["episode"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed row {lineno}: {exc}") from exc
            rows.append(row)
    return rows
