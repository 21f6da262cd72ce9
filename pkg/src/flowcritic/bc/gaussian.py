"""Single-Gaussian behavior cloning with exact log-likelihood."""

from __future__ import annotations

import numpy as np

from ..nn import AdamState, Mlp, Tensor, adam_step, zero_grads
from ..nn.tensor import clip, slice_cols, texp, tsum

LOG_STD_MIN = -5.0
LOG_STD_MAX = 5.0
LOG_2PI = float(np.log(2.0 * np.pi))


class GaussianBc:
    """State-conditioned diagonal Gaussian over actions."""

    def __init__(self, state_dim: int, action_dim: int, widths, rng: np.random.Generator):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.net = Mlp(self.state_dim, widths, 2 * self.action_dim, rng=rng)

    def params(self):
        return self.net.params()

    def mean_and_log_std(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.net.forward_np(states)
        mean = out[:, : self.action_dim]
        log_std = np.clip(out[:, self.action_dim :], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def sample(self, states: np.ndarray, rng: np.random.Generator, clamp: bool = True) -> np.ndarray:
        mean, log_std = self.mean_and_log_std(states)
        a = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return np.clip(a, -1.0, 1.0) if clamp else a


def gaussian_nll_loss(model: GaussianBc, states: np.ndarray, actions: np.ndarray) -> Tensor:
    """Mean negative log-likelihood on the tape (the MLE training objective)."""
    n, d = actions.shape
    out = model.net.forward(Tensor(np.asarray(states, dtype=np.float64)))
    mean = slice_cols(out, 0, d)
    log_std = clip(slice_cols(out, d, 2 * d), LOG_STD_MIN, LOG_STD_MAX)
    diff = mean - Tensor(np.asarray(actions, dtype=np.float64))
    inv_var = texp(log_std * (-2.0))
    per_dim = diff * diff * inv_var + log_std * 2.0 + LOG_2PI
    return tsum(per_dim) * (0.5 / n)


def gaussian_logpdf(model: GaussianBc, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    mean, log_std = model.mean_and_log_std(states)
    diff = np.asarray(actions, dtype=np.float64) - mean
    var = np.exp(2.0 * log_std)
    return -0.5 * ((diff * diff / var) + 2.0 * log_std + LOG_2PI).sum(axis=1)


def gaussian_fit(
    states: np.ndarray,
    actions: np.ndarray,
    rng: np.random.Generator,
    widths=(256, 256),
    steps: int = 2000,
    batch_size: int = 256,
    lr: float = 3e-4,
) -> GaussianBc:
    model = GaussianBc(states.shape[1], actions.shape[1], widths, rng)
    params = model.params()
    opt = AdamState(params)
    n = actions.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        zero_grads(params)
        loss = gaussian_nll_loss(model, states[idx], actions[idx])
        loss.backward()
        adam_step(params, opt, lr=lr)
    return model
