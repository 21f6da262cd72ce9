"""Bandit-scale comparison algorithms: FQL, CQL, and SVR.

FQL is literally the penalized algorithm with alpha=0, so its entry points
delegate to the same code path. CQL and SVR get small self-contained
implementations around a Gaussian policy: CQL pushes Q down under the
current policy and up on data, SVR penalizes via an importance-weighted
spread around the actor whose ratio against a Gaussian behavior fit is the
quantity of interest (it saturates its clip bound on multimodal data).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bc import GaussianBc, gaussian_fit, gaussian_logpdf
from .data import OfflineDataset
from .agent import CriticPair, Agent, AgentConfig, TrainingError, actor_loss, critic_loss, train_offline
from .nn import AdamState, Mlp, Tensor, adam_step, zero_grads
from .nn.tensor import clip, concat, slice_cols, texp, tsum

LOG_2PI = float(np.log(2.0 * np.pi))
ACTOR_LOG_STD_MIN = float(np.log(0.01))
ACTOR_LOG_STD_MAX = 2.0


# -- FQL ----------------------------------------------------------------------


def fql_losses(agent: Agent, proxy, batch: dict, log_eps, rng) -> tuple:
    """(actor loss, critic loss) of the unpenalized slice; requires alpha=0.

    Delegates to the penalized implementations so equality with them is a
    property of the call, not of a reimplementation.
    """
    if agent.config.alpha != 0.0:
        raise ValueError("fql requires alpha=0")
    c, c_info = critic_loss(agent, proxy, batch, log_eps, rng)
    a, a_info = actor_loss(agent, proxy, batch, rng)
    return (a, c, {**c_info, **a_info})


def train_fql(dataset: OfflineDataset, config: AgentConfig, rng, proxy=None):
    """Offline training with the penalty coefficient forced to zero."""
    cfg = AgentConfig(**{**config.__dict__, "alpha": 0.0})
    return train_offline(dataset, cfg, rng, proxy=proxy)


# -- Gaussian policy -----------------------------------------------------------


class GaussianActor:
    """Reparameterized diagonal Gaussian policy with a 0.01 std floor."""

    def __init__(self, state_dim: int, action_dim: int, widths, rng: np.random.Generator):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.net = Mlp(self.state_dim, widths, 2 * self.action_dim, rng=rng)

    def params(self):
        return self.net.params()

    def dist_np(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.net.forward_np(states)
        mean = out[:, : self.action_dim]
        log_std = np.clip(out[:, self.action_dim :], ACTOR_LOG_STD_MIN, ACTOR_LOG_STD_MAX)
        return mean, log_std

    def sample_np(self, states: np.ndarray, rng: np.random.Generator, clamp: bool = True) -> np.ndarray:
        mean, log_std = self.dist_np(states)
        a = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return np.clip(a, -1.0, 1.0) if clamp else a

    def rsample(self, states: np.ndarray, rng: np.random.Generator):
        """Tape-carried action plus its log-probability under the policy.

        The noise is constant, so the log-prob reduces to a function of the
        predicted log-std alone.
        """
        n, d = states.shape[0], self.action_dim
        out = self.net.forward(Tensor(np.asarray(states, dtype=np.float64)))
        mean = slice_cols(out, 0, d)
        log_std = clip(slice_cols(out, d, 2 * d), ACTOR_LOG_STD_MIN, ACTOR_LOG_STD_MAX)
        eps = rng.standard_normal((n, d))
        action = mean + texp(log_std) * eps
        lp = log_std * (-1.0) - (0.5 * LOG_2PI + 0.5 * eps * eps)
        return action, tsum(lp, axis=1, keepdims=True)


# -- CQL ------------------------------------------------------------------------


@dataclass
class CqlConfig:
    alpha: float = 1.0
    eta: float = 0.1

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.eta)):
            raise ValueError("CQL coefficients must be finite")


def cql_losses(
    actor: GaussianActor,
    critics: CriticPair,
    batch: dict,
    rng: np.random.Generator,
    config: CqlConfig,
) -> tuple:
    """(actor loss, critic loss) for the single-step conservative baseline.

    Critic: alpha * (mean Q at policy actions - mean Q at data actions) plus
    regression onto raw reward. Actor: maximize Q minus eta times its own
    log-probability, reparameterized.
    """
    states = batch["states"]
    actions = batch["actions"]
    rewards = np.asarray(batch["rewards"], dtype=np.float64).reshape(-1, 1)
    n = states.shape[0]

    a_pi = actor.sample_np(states, rng)
    x_pi = Tensor(np.concatenate([states, a_pi], axis=1))
    x_data = Tensor(np.concatenate([states, actions], axis=1))
    r_t = Tensor(rewards)
    c_total = None
    for net in (critics.q1, critics.q2):
        gap = net.forward(x_pi).sum() * (1.0 / n) - net.forward(x_data).sum() * (1.0 / n)
        td = net.forward(x_data) - r_t
        term = gap * config.alpha + (td * td).sum() * (1.0 / n)
        c_total = term if c_total is None else c_total + term

    a_sample, log_prob = actor.rsample(states, rng)
    x_actor = concat([Tensor(np.asarray(states, dtype=np.float64)), a_sample])
    q1 = critics.q1.forward(x_actor)
    q2 = critics.q2.forward(x_actor)
    m = (q1.data <= q2.data).astype(np.float64)
    q = q1 * m + q2 * (1.0 - m) if critics.aggregation == "min" else (q1 + q2) * 0.5
    a_total = (q - log_prob * config.eta).sum() * (-1.0 / n)

    for t in (a_total, c_total):
        if not np.isfinite(t.item()):
            raise TrainingError("CQL loss is not finite")
    return a_total, c_total


def train_cql(
    dataset: OfflineDataset,
    config: CqlConfig,
    rng: np.random.Generator,
    steps: int = 5000,
    batch_size: int = 256,
    lr: float = 3e-4,
    widths=(64, 64),
) -> tuple[GaussianActor, CriticPair, list[dict]]:
    actor = GaussianActor(dataset.state_dim, dataset.action_dim, widths, rng)
    critics = CriticPair(dataset.state_dim, dataset.action_dim, widths, rng)
    actor_params, critic_params = actor.params(), critics.params()
    actor_opt, critic_opt = AdamState(actor_params), AdamState(critic_params)
    n = len(dataset)
    metrics = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, size=batch_size)
        batch = {
            "states": dataset.states[idx],
            "actions": dataset.actions[idx],
            "rewards": dataset.rewards[idx],
        }
        a_loss, c_loss = cql_losses(actor, critics, batch, rng, config)
        zero_grads(critic_params)
        c_loss.backward()
        adam_step(critic_params, critic_opt, lr=lr)
        zero_grads(actor_params)
        a_loss.backward()
        adam_step(actor_params, actor_opt, lr=lr)
        if step % 500 == 0 or step == steps:
            metrics.append({"step": step, "critic_loss": float(c_loss.item()), "actor_loss": float(a_loss.item())})
    return actor, critics, metrics


# -- SVR ------------------------------------------------------------------------


@dataclass
class SvrConfig:
    alpha: float = 1.0
    k: float = 2.0
    q_min: float = 0.0
    ratio_clip: float = 1e4

    def __post_init__(self):
        if self.ratio_clip <= 0:
            raise ValueError("ratio clip bound must be positive")
        if self.k <= 1:
            raise ValueError("proposal std multiplier must exceed 1")


def svr_losses(
    actor: GaussianActor,
    behavior: GaussianBc,
    critics: CriticPair,
    batch: dict,
    rng: np.random.Generator,
    config: SvrConfig,
) -> tuple:
    """(actor loss, critic loss, info) with the importance-ratio diagnostics.

    The proposal zeta shares the actor mean with std scaled by k. Its density
    ratio against the Gaussian behavior fit is computed in log space and
    clipped at ratio_clip; the whole penalization term is clipped to plus or
    minus ratio_clip as well. info carries the batch maximum of the clipped
    ratio.
    """
    states = batch["states"]
    actions = batch["actions"]
    rewards = np.asarray(batch["rewards"], dtype=np.float64).reshape(-1, 1)
    n = states.shape[0]

    mean, log_std = actor.dist_np(states)
    zeta_std = config.k * np.exp(log_std)
    a_zeta = np.clip(mean + zeta_std * rng.standard_normal(mean.shape), -1.0, 1.0)

    # log zeta(a|s) / behavior(a|s) at the dataset actions. The inner bound
    # keeps exp finite; the outer minimum lands exactly on the clip value.
    diff = actions - mean
    log_zeta = -0.5 * ((diff / zeta_std) ** 2 + 2.0 * np.log(zeta_std) + LOG_2PI).sum(axis=1)
    log_behavior = gaussian_logpdf(behavior, states, actions)
    ratio = np.minimum(np.exp(np.minimum(log_zeta - log_behavior, 700.0)), config.ratio_clip)
    ratio_col = ratio.reshape(-1, 1)

    x_zeta = Tensor(np.concatenate([states, a_zeta], axis=1))
    x_data = Tensor(np.concatenate([states, actions], axis=1))
    r_t = Tensor(rewards)
    c_total = None
    for net in (critics.q1, critics.q2):
        q_zeta = net.forward(x_zeta) - config.q_min
        q_data = net.forward(x_data) - config.q_min
        spread = (q_zeta * q_zeta).sum() * (1.0 / n)
        weighted = (Tensor(ratio_col) * q_data * q_data).sum() * (1.0 / n)
        penalty = clip(spread - weighted, -config.ratio_clip, config.ratio_clip) * config.alpha
        td = net.forward(x_data) - r_t
        term = penalty + (td * td).sum() * (1.0 / n)
        c_total = term if c_total is None else c_total + term

    a_sample, _ = actor.rsample(states, rng)
    x_actor = concat([Tensor(np.asarray(states, dtype=np.float64)), a_sample])
    q1 = critics.q1.forward(x_actor)
    q2 = critics.q2.forward(x_actor)
    m = (q1.data <= q2.data).astype(np.float64)
    q = q1 * m + q2 * (1.0 - m) if critics.aggregation == "min" else (q1 + q2) * 0.5
    a_total = q.sum() * (-1.0 / n)

    for t in (a_total, c_total):
        if not np.isfinite(t.item()):
            raise TrainingError("SVR loss is not finite")
    return a_total, c_total, {"is_ratio_max": float(ratio.max())}


def train_svr(
    dataset: OfflineDataset,
    config: SvrConfig,
    rng: np.random.Generator,
    steps: int = 5000,
    batch_size: int = 256,
    lr: float = 3e-4,
    widths=(64, 64),
    behavior_steps: int = 1500,
) -> tuple[GaussianActor, GaussianBc, CriticPair, list[dict]]:
    """Fits the Gaussian behavior model, then runs the penalized loop.

    q_min is overwritten with the dataset's minimum reward, the single-step
    convention for the value floor.
    """
    behavior = gaussian_fit(
        dataset.states, dataset.actions, rng, widths=widths, steps=behavior_steps, batch_size=batch_size, lr=lr
    )
    config.q_min = float(np.min(dataset.rewards))
    actor = GaussianActor(dataset.state_dim, dataset.action_dim, widths, rng)
    critics = CriticPair(dataset.state_dim, dataset.action_dim, widths, rng)
    actor_params, critic_params = actor.params(), critics.params()
    actor_opt, critic_opt = AdamState(actor_params), AdamState(critic_params)
    n = len(dataset)
    metrics = []
    ratio_max_seen = 0.0
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, size=batch_size)
        batch = {
            "states": dataset.states[idx],
            "actions": dataset.actions[idx],
            "rewards": dataset.rewards[idx],
        }
        a_loss, c_loss, info = svr_losses(actor, behavior, critics, batch, rng, config)
        ratio_max_seen = max(ratio_max_seen, info["is_ratio_max"])
        zero_grads(critic_params)
        c_loss.backward()
        adam_step(critic_params, critic_opt, lr=lr)
        zero_grads(actor_params)
        a_loss.backward()
        adam_step(actor_params, actor_opt, lr=lr)
        if step % 500 == 0 or step == steps:
            metrics.append(
                {
                    "step": step,
                    "critic_loss": float(c_loss.item()),
                    "actor_loss": float(a_loss.item()),
                    "is_ratio_max": ratio_max_seen,
                }
            )
    return actor, behavior, critics, metrics
