"""Flow actor-critic: density-penalized twin critics and a distilled one-step actor.

The algorithm runs in two stages. Stage one fits the transport proxy to the
dataset actions and stores each pair's log-density. Stage two alternates a
critic update, whose TD regression is augmented by a penalty pushing down
Q-values on actions the proxy scores below a density threshold, with an actor
update that maximizes (optionally normalized) Q while staying close to the
proxy's transport output for a shared noise draw. Online fine-tuning repeats
the same updates inside a collect/update loop over a growing replay buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import OfflineDataset
from .flow import (
    VelocityProxy,
    euler_sample,
    flow_matching_loss,
    log_density_exact,
    train_proxy,
)
from .nn import AdamState, Mlp, Tensor, adam_step, concat, ema_update, zero_grads
from .nn.tensor import clip


class TrainingError(RuntimeError):
    """A loss became non-finite; training state is not trustworthy."""


EPSILON_SCHEMES = ("dataset-wide", "batch-adaptive", "batch-wide")


# -- penalty weight ----------------------------------------------------------


def penalty_weight(log_beta, log_eps) -> np.ndarray:
    """Linear penalty weight max(0, 1 - beta/eps), computed in log space."""
    return np.maximum(0.0, 1.0 - np.exp(np.asarray(log_beta) - np.asarray(log_eps)))


def penalty_weight_variant(log_beta, log_eps, shape: str = "linear") -> np.ndarray:
    """Weight with an alternative falloff between the beta=0 and beta=eps ends.

    The concave (kappa=2) and convex (kappa=1/2) shapes replace the linear
    ramp by 1 - log2(ratio^kappa + 1); all shapes hit 0 at ratio 1 and 1 at
    ratio 0.
    """
    if shape == "linear":
        return penalty_weight(log_beta, log_eps)
    if shape == "concave":
        kappa = 2.0
    elif shape == "convex":
        kappa = 0.5
    else:
        raise ValueError(f"unknown weight shape {shape!r}")
    ratio = np.exp(np.asarray(log_beta) - np.asarray(log_eps))
    return np.maximum(0.0, 1.0 - np.log2(ratio**kappa + 1.0))


def epsilon_threshold(
    scheme: str,
    dataset_log_density: np.ndarray | None,
    batch_log_density: np.ndarray,
) -> np.ndarray:
    """Per-sample log-threshold under the configured scheme.

    dataset-wide uses the minimum of the full stored column, batch-wide the
    minimum of the current batch, batch-adaptive each state's own stored
    value (so the dataset action itself always gets weight 0).
    """
    batch_log_density = np.asarray(batch_log_density, dtype=np.float64)
    n = batch_log_density.shape[0]
    if scheme == "dataset-wide":
        if dataset_log_density is None:
            raise ValueError("dataset-wide threshold requires a stored density column")
        return np.full(n, float(np.min(dataset_log_density)))
    if scheme == "batch-wide":
        return np.full(n, float(np.min(batch_log_density)))
    if scheme == "batch-adaptive":
        return batch_log_density.copy()
    raise ValueError(f"unknown epsilon scheme {scheme!r}")


# -- networks ----------------------------------------------------------------


class OneStepActor:
    """Deterministic map (state, noise) -> action, output clamped to the box."""

    def __init__(self, state_dim: int, action_dim: int, widths, rng: np.random.Generator):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.net = Mlp(self.state_dim + self.action_dim, widths, self.action_dim, rng=rng)

    def params(self):
        return self.net.params()

    def forward(self, states: np.ndarray, z: np.ndarray) -> Tensor:
        raw = self.net.forward(Tensor(np.concatenate([states, z], axis=1)))
        return clip(raw, -1.0, 1.0)

    def act_np(self, states: np.ndarray, z: np.ndarray) -> np.ndarray:
        raw = self.net.forward_np(np.concatenate([states, z], axis=1))
        return np.clip(raw, -1.0, 1.0)

    def sample_np(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((states.shape[0], self.action_dim))
        return self.act_np(states, z)


class CriticPair:
    """Twin critics with EMA target copies and a selectable aggregation."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        widths,
        rng: np.random.Generator,
        aggregation: str = "min",
    ):
        if aggregation not in ("min", "mean"):
            raise ValueError(f"aggregation must be 'min' or 'mean', got {aggregation!r}")
        self.aggregation = aggregation
        self.q1 = Mlp(state_dim + action_dim, widths, 1, use_layer_norm=True, rng=rng)
        self.q2 = Mlp(state_dim + action_dim, widths, 1, use_layer_norm=True, rng=rng)
        self.target1 = self.q1.clone()
        self.target2 = self.q2.clone()

    def params(self):
        out = {f"q1.{k}": v for k, v in self.q1.params().items()}
        out.update({f"q2.{k}": v for k, v in self.q2.params().items()})
        return out

    def _agg(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.minimum(a, b) if self.aggregation == "min" else 0.5 * (a + b)

    def online_np(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([states, actions], axis=1)
        return self._agg(self.q1.forward_np(x), self.q2.forward_np(x))[:, 0]

    def target_np(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([states, actions], axis=1)
        return self._agg(self.target1.forward_np(x), self.target2.forward_np(x))[:, 0]

    def update_targets(self, rho: float) -> None:
        ema_update(self.target1.params(), self.q1.params(), rho)
        ema_update(self.target2.params(), self.q2.params(), rho)


# -- configuration -----------------------------------------------------------


@dataclass
class AgentConfig:
    alpha: float = 0.5
    lam: float = 0.1
    gamma: float = 0.99
    rho: float = 0.005
    eps_scheme: str = "dataset-wide"
    q_norm: bool = True
    aggregation: str = "min"
    steps: int = 10000
    batch_size: int = 256
    lr: float = 3e-4
    actor_widths: tuple = (64, 64)
    critic_widths: tuple = (64, 64)
    proxy_widths: tuple = (64, 64)
    proxy_steps: int = 3000
    n_steps: int = 10
    log_every: int = 500

    def __post_init__(self):
        for name in ("alpha", "lam", "gamma", "rho", "lr"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lambda must be nonnegative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.eps_scheme not in EPSILON_SCHEMES:
            raise ValueError(f"eps_scheme must be one of {EPSILON_SCHEMES}")
        if self.aggregation not in ("min", "mean"):
            raise ValueError("aggregation must be 'min' or 'mean'")


@dataclass
class Agent:
    actor: OneStepActor
    critics: CriticPair
    config: AgentConfig


# -- losses ------------------------------------------------------------------


def critic_loss(
    agent: Agent,
    proxy: VelocityProxy,
    batch: dict,
    log_eps: np.ndarray,
    rng: np.random.Generator,
) -> tuple[Tensor, dict]:
    """Penalized TD loss for both critics.

    Penalty actions are drawn fresh from the actor; their proxy log-density
    against the per-sample threshold fixes the weight, which enters the loss
    as a constant. The TD target uses the target networks and is likewise
    constant. Sum of both critics' (alpha * mean(w * Q) + mean squared TD
    error).
    """
    cfg = agent.config
    states = batch["states"]
    actions = batch["actions"]
    rewards = batch["rewards"]
    n = states.shape[0]

    # alpha=0 skips the penalty machinery entirely, leaving a plain TD update
    # (and drawing nothing from rng for it), so the unpenalized ablation is
    # the identical code path rather than a zero-weighted shadow of it.
    penalized = cfg.alpha > 0.0
    if penalized:
        a_pi = agent.actor.sample_np(states, rng)
        log_beta = log_density_exact(proxy, states, a_pi, n_steps=cfg.n_steps)
        w = penalty_weight(log_beta, log_eps).reshape(-1, 1)

    y = np.asarray(rewards, dtype=np.float64).copy()
    if cfg.gamma > 0.0:
        next_states = batch["next_states"]
        live = 1.0 - np.asarray(batch["terminals"], dtype=np.float64)
        a_next = agent.actor.sample_np(next_states, rng)
        y = y + cfg.gamma * live * agent.critics.target_np(next_states, a_next)
    y = y.reshape(-1, 1)

    x_data = Tensor(np.concatenate([states, actions], axis=1))
    y_t = Tensor(y)
    if penalized:
        x_pi = Tensor(np.concatenate([states, a_pi], axis=1))
        w_t = Tensor(w)
    total = None
    for net in (agent.critics.q1, agent.critics.q2):
        td = net.forward(x_data) - y_t
        term = (td * td).sum() * (1.0 / n)
        if penalized:
            term = term + (w_t * net.forward(x_pi)).sum() * (cfg.alpha / n)
        total = term if total is None else total + term
    if not np.isfinite(total.item()):
        raise TrainingError(f"critic loss is not finite: {total.item()}")
    if penalized:
        info = {"mean_w": float(w.mean()), "mean_q": float(agent.critics.online_np(states, a_pi).mean())}
    else:
        info = {"mean_w": 0.0, "mean_q": float(agent.critics.online_np(states, actions).mean())}
    return total, info


def actor_loss(
    agent: Agent,
    proxy: VelocityProxy,
    batch: dict,
    rng: np.random.Generator,
) -> tuple[Tensor, dict]:
    """Q-maximization plus distillation toward the proxy's transport output.

    One noise draw per state feeds both terms: the actor's one-step action
    and the proxy's multi-step sample (a constant). The Q term is divided by
    the batch mean absolute aggregated Q, also constant, when normalization
    is on.
    """
    cfg = agent.config
    states = batch["states"]
    n = states.shape[0]
    z = rng.standard_normal((n, agent.actor.action_dim))
    a_proxy = np.clip(euler_sample(proxy, states, z, n_steps=cfg.n_steps), -1.0, 1.0)

    a_theta = agent.actor.forward(states, z)
    s_t = Tensor(np.asarray(states, dtype=np.float64))
    x = concat([s_t, a_theta])
    q1 = agent.critics.q1.forward(x)
    q2 = agent.critics.q2.forward(x)
    if agent.critics.aggregation == "min":
        # Constant mask keeps the tape selecting whichever critic is lower.
        m = (q1.data <= q2.data).astype(np.float64)
        q = q1 * m + q2 * (1.0 - m)
    else:
        q = (q1 + q2) * 0.5

    denom = float(np.abs(q.data).mean()) if cfg.q_norm else 1.0
    denom = max(denom, 1e-12)
    diff = a_theta - Tensor(a_proxy)
    distill = (diff * diff).sum() * (1.0 / n)
    loss = q.sum() * (-1.0 / (n * denom)) + distill * cfg.lam
    if not np.isfinite(loss.item()):
        raise TrainingError(f"actor loss is not finite: {loss.item()}")
    info = {"mean_q_actor": float(q.data.mean()), "distill": float(distill.item())}
    return loss, info


# -- offline training --------------------------------------------------------


def precompute_densities(
    proxy: VelocityProxy, dataset: OfflineDataset, chunk: int = 2048
) -> OfflineDataset:
    """Return a copy of the dataset carrying clamped proxy log-densities."""
    cols = []
    for lo in range(0, len(dataset), chunk):
        hi = min(lo + chunk, len(dataset))
        cols.append(log_density_exact(proxy, dataset.states[lo:hi], dataset.actions[lo:hi]))
    return OfflineDataset(
        states=dataset.states,
        actions=dataset.actions,
        rewards=dataset.rewards,
        next_states=dataset.next_states,
        terminals=dataset.terminals,
        log_density=np.concatenate(cols) if cols else np.zeros(0),
        metadata=dict(dataset.metadata),
    )


def _sample_batch(dataset: OfflineDataset, idx: np.ndarray) -> dict:
    return {
        "states": dataset.states[idx],
        "actions": dataset.actions[idx],
        "rewards": dataset.rewards[idx],
        "next_states": dataset.next_states[idx],
        "terminals": dataset.terminals[idx],
        "log_density": None if dataset.log_density is None else dataset.log_density[idx],
    }


def train_step(
    agent: Agent,
    proxy: VelocityProxy,
    dataset: OfflineDataset,
    critic_opt: AdamState,
    actor_opt: AdamState,
    rng: np.random.Generator,
) -> dict:
    """One critic update, one actor update, one target EMA, on a fresh batch.

    The checkpointing harness drives this directly so an interrupted run
    resumes on the byte-identical trajectory; train_offline wraps it.
    """
    cfg = agent.config
    idx = rng.integers(0, len(dataset), size=cfg.batch_size)
    batch = _sample_batch(dataset, idx)
    log_eps = epsilon_threshold(cfg.eps_scheme, dataset.log_density, batch["log_density"])

    critic_params = agent.critics.params()
    actor_params = agent.actor.params()

    zero_grads(critic_params)
    c_loss, c_info = critic_loss(agent, proxy, batch, log_eps, rng)
    c_loss.backward()
    adam_step(critic_params, critic_opt, lr=cfg.lr)

    zero_grads(actor_params)
    a_loss, a_info = actor_loss(agent, proxy, batch, rng)
    a_loss.backward()
    adam_step(actor_params, actor_opt, lr=cfg.lr)

    agent.critics.update_targets(cfg.rho)
    return {
        "critic_loss": float(c_loss.item()),
        "actor_loss": float(a_loss.item()),
        "mean_w": c_info["mean_w"],
        "mean_q": c_info["mean_q"],
        "distill": a_info["distill"],
    }


def train_offline(
    dataset: OfflineDataset,
    config: AgentConfig,
    rng: np.random.Generator,
    proxy: VelocityProxy | None = None,
) -> tuple[Agent, VelocityProxy, list[dict]]:
    """Two-stage procedure: fit the proxy and density column, then run the
    critic/actor/EMA loop. Passing a trained proxy skips stage one's fit but
    still refreshes the density column."""
    s_dim, a_dim = dataset.state_dim, dataset.action_dim
    if proxy is None:
        proxy = VelocityProxy(s_dim, a_dim, config.proxy_widths, rng, n_steps=config.n_steps)
        train_proxy(
            proxy,
            dataset.states,
            dataset.actions,
            rng,
            steps=config.proxy_steps,
            batch_size=config.batch_size,
            lr=config.lr,
        )
    dataset = precompute_densities(proxy, dataset)

    agent = Agent(
        actor=OneStepActor(s_dim, a_dim, config.actor_widths, rng),
        critics=CriticPair(s_dim, a_dim, config.critic_widths, rng, aggregation=config.aggregation),
        config=config,
    )
    critic_opt = AdamState(agent.critics.params())
    actor_opt = AdamState(agent.actor.params())

    metrics: list[dict] = []
    for step in range(1, config.steps + 1):
        info = train_step(agent, proxy, dataset, critic_opt, actor_opt, rng)
        if config.log_every and (step % config.log_every == 0 or step == config.steps):
            metrics.append({"step": step, **info})
    return agent, proxy, metrics


# -- online fine-tuning --------------------------------------------------------


class ReplayBuffer:
    """Growable column store seeded from an offline dataset."""

    def __init__(self, dataset: OfflineDataset):
        self.states = [row for row in dataset.states]
        self.actions = [row for row in dataset.actions]
        self.rewards = list(np.asarray(dataset.rewards, dtype=np.float64))
        self.next_states = [row for row in dataset.next_states]
        self.terminals = list(np.asarray(dataset.terminals, dtype=bool))

    def add(self, state, action, reward, next_state, terminal) -> None:
        self.states.append(np.asarray(state, dtype=np.float64))
        self.actions.append(np.asarray(action, dtype=np.float64))
        self.rewards.append(float(reward))
        self.next_states.append(np.asarray(next_state, dtype=np.float64))
        self.terminals.append(bool(terminal))

    def __len__(self) -> int:
        return len(self.states)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        idx = rng.integers(0, len(self.states), size=batch_size)
        return {
            "states": np.stack([self.states[i] for i in idx]),
            "actions": np.stack([self.actions[i] for i in idx]),
            "rewards": np.array([self.rewards[i] for i in idx]),
            "next_states": np.stack([self.next_states[i] for i in idx]),
            "terminals": np.array([self.terminals[i] for i in idx]),
        }


def finetune_step(
    agent: Agent,
    proxy: VelocityProxy,
    env,
    replay: ReplayBuffer,
    critic_opt: AdamState,
    actor_opt: AdamState,
    proxy_opt: AdamState,
    rng: np.random.Generator,
    env_state: np.ndarray,
    env_steps_per_update: int = 1,
) -> tuple[np.ndarray, dict]:
    """One collect-and-update iteration; returns the env cursor for the next.

    The density threshold is recomputed from the current proxy on each batch,
    so the dataset-wide scheme is replaced by its batch-wide analogue here.
    """
    cfg = agent.config
    scheme = "batch-wide" if cfg.eps_scheme == "dataset-wide" else cfg.eps_scheme
    state = env_state
    for _ in range(env_steps_per_update):
        action = agent.actor.sample_np(state.reshape(1, -1), rng)[0]
        next_state, reward, terminal = env.step(action)
        replay.add(state, action, reward, next_state, terminal)
        state = env.reset() if terminal else next_state

    batch = replay.sample(cfg.batch_size, rng)

    proxy_params = proxy.net.params()
    zero_grads(proxy_params)
    fm = flow_matching_loss(proxy, batch["states"], batch["actions"], rng)
    fm.backward()
    adam_step(proxy_params, proxy_opt, lr=cfg.lr)

    batch_log_density = log_density_exact(
        proxy, batch["states"], batch["actions"], n_steps=cfg.n_steps
    )
    log_eps = epsilon_threshold(scheme, None, batch_log_density)

    critic_params = agent.critics.params()
    actor_params = agent.actor.params()

    zero_grads(critic_params)
    c_loss, c_info = critic_loss(agent, proxy, batch, log_eps, rng)
    c_loss.backward()
    adam_step(critic_params, critic_opt, lr=cfg.lr)

    zero_grads(actor_params)
    a_loss, a_info = actor_loss(agent, proxy, batch, rng)
    a_loss.backward()
    adam_step(actor_params, actor_opt, lr=cfg.lr)

    agent.critics.update_targets(cfg.rho)
    info = {
        "critic_loss": float(c_loss.item()),
        "actor_loss": float(a_loss.item()),
        "mean_w": c_info["mean_w"],
        "mean_q": c_info["mean_q"],
        "replay_size": len(replay),
    }
    return state, info


def train_online_finetune(
    agent: Agent,
    proxy: VelocityProxy,
    env,
    replay: ReplayBuffer,
    config: AgentConfig,
    rng: np.random.Generator,
    env_steps_per_update: int = 1,
) -> tuple[Agent, list[dict]]:
    """Joint collect-and-update loop on a growing replay buffer.

    Every iteration appends env transitions gathered by the current actor,
    then updates proxy, critics, actor, and targets on one replay batch. With
    env_steps_per_update=0 this is continued offline training on the replay
    contents.
    """
    critic_opt = AdamState(agent.critics.params())
    actor_opt = AdamState(agent.actor.params())
    proxy_opt = AdamState(proxy.net.params())

    metrics: list[dict] = []
    state = env.reset()
    for step in range(1, config.steps + 1):
        state, info = finetune_step(
            agent, proxy, env, replay, critic_opt, actor_opt, proxy_opt,
            rng, state, env_steps_per_update,
        )
        if config.log_every and (step % config.log_every == 0 or step == config.steps):
            metrics.append({"step": step, **info})
    return agent, metrics
