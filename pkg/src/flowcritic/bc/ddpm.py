"""Denoising diffusion behavior cloning.

A discrete-time noising chain corrupts dataset actions toward a standard
normal; an epsilon-prediction net learns to invert it. Besides sampling, the
model scores actions through the standard variational bound, so it can sit in
the same density comparison as models with exact likelihoods.
"""

from __future__ import annotations

import numpy as np

from ..nn import AdamState, Mlp, Tensor, adam_step, zero_grads
from .gaussian import LOG_2PI

BETA_MIN = 0.1
BETA_MAX = 10.0


def noise_schedule(n_steps: int) -> dict[str, np.ndarray]:
    """Per-step variances and their cumulative products, indexed 1..n_steps.

    Arrays are laid out with a slot at index 0 so that schedule["beta"][t]
    is the step-t value; alpha_bar[0] is 1 by convention, which makes the
    posterior variance beta_tilde exactly 0 at t=1.
    """
    n = int(n_steps)
    t = np.arange(0, n + 1, dtype=np.float64)
    beta = np.zeros(n + 1)
    beta[1:] = 1.0 - np.exp(
        -BETA_MIN / n - (BETA_MAX - BETA_MIN) * (2.0 * t[1:] - 1.0) / (2.0 * n * n)
    )
    alpha = 1.0 - beta
    alpha_bar = np.ones(n + 1)
    alpha_bar[1:] = np.cumprod(alpha[1:])
    one_minus_bar = 1.0 - alpha_bar
    # Keeps the t=1 division finite; everywhere else 1 - alpha_bar is far larger.
    one_minus_bar_safe = np.maximum(one_minus_bar, 1e-12)
    beta_tilde = np.zeros(n + 1)
    beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / one_minus_bar_safe[1:] * beta[1:]
    return {
        "beta": beta,
        "alpha": alpha,
        "alpha_bar": alpha_bar,
        "beta_tilde": beta_tilde,
    }


class DdpmBc:
    """Epsilon-prediction net over a fixed-length noising chain."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        widths,
        rng: np.random.Generator,
        n_steps: int = 50,
    ):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.n_steps = int(n_steps)
        self.schedule = noise_schedule(self.n_steps)
        # Time enters as the scalar feature t / n_steps.
        self.net = Mlp(self.state_dim + self.action_dim + 1, widths, self.action_dim, rng=rng)

    def params(self):
        return self.net.params()

    def _inputs(self, states: np.ndarray, noisy: np.ndarray, t: np.ndarray) -> np.ndarray:
        t_col = (np.asarray(t, dtype=np.float64) / self.n_steps).reshape(-1, 1)
        return np.concatenate([states, noisy, t_col], axis=1)

    def predict_eps_np(self, states: np.ndarray, noisy: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.net.forward_np(self._inputs(states, noisy, t))


def ddpm_loss(
    model: DdpmBc, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator
) -> Tensor:
    """Mean squared epsilon-prediction error at a uniformly drawn step.

    Draw order is the step indices first, then the noise; tests replay it.
    """
    n = actions.shape[0]
    sched = model.schedule
    t = rng.integers(1, model.n_steps + 1, size=n)
    eps = rng.standard_normal(actions.shape)
    ab = sched["alpha_bar"][t].reshape(-1, 1)
    noisy = np.sqrt(ab) * actions + np.sqrt(1.0 - ab) * eps
    pred = model.net.forward(Tensor(model._inputs(states, noisy, t)))
    diff = pred - Tensor(eps)
    return (diff * diff).sum() * (1.0 / n)


def ddpm_sample(
    model: DdpmBc, states: np.ndarray, rng: np.random.Generator, clamp: bool = True
) -> np.ndarray:
    """Ancestral sampler; the final step adds no noise."""
    sched = model.schedule
    n = states.shape[0]
    x = rng.standard_normal((n, model.action_dim))
    for t in range(model.n_steps, 0, -1):
        beta = sched["beta"][t]
        alpha = sched["alpha"][t]
        ab = sched["alpha_bar"][t]
        eps_hat = model.predict_eps_np(states, x, np.full(n, t))
        x = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
        if t > 1:
            x = x + np.sqrt(beta) * rng.standard_normal(x.shape)
    return np.clip(x, -1.0, 1.0) if clamp else x


def ddpm_elbo(
    model: DdpmBc,
    states: np.ndarray,
    actions: np.ndarray,
    rng: np.random.Generator,
    n_draws: int = 10,
) -> np.ndarray:
    """Per-pair variational lower bound on log-density, averaged over noise draws.

    The posterior-matching terms use the exact posterior variance beta_tilde;
    the step-1 reconstruction uses variance beta_1 since beta_tilde vanishes
    there. The prior term is closed form and needs no sampling.
    """
    s = np.asarray(states, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    n, d = a.shape
    sched = model.schedule
    ab_last = sched["alpha_bar"][model.n_steps]
    prior_kl = 0.5 * (ab_last * (a * a).sum(axis=1) - d * ab_last - d * np.log(1.0 - ab_last))

    total = np.zeros(n)
    for _ in range(n_draws):
        bound = -prior_kl.copy()
        for t in range(model.n_steps, 0, -1):
            beta = sched["beta"][t]
            alpha = sched["alpha"][t]
            ab = sched["alpha_bar"][t]
            ab_prev = sched["alpha_bar"][t - 1]
            eps = rng.standard_normal(a.shape)
            noisy = np.sqrt(ab) * a + np.sqrt(1.0 - ab) * eps
            eps_hat = model.predict_eps_np(s, noisy, np.full(n, t))
            mean_model = (noisy - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
            if t > 1:
                mean_post = (
                    np.sqrt(ab_prev) * beta * a + np.sqrt(alpha) * (1.0 - ab_prev) * noisy
                ) / (1.0 - ab)
                gap = ((mean_post - mean_model) ** 2).sum(axis=1)
                bound -= gap / (2.0 * sched["beta_tilde"][t])
            else:
                gap = ((a - mean_model) ** 2).sum(axis=1)
                bound -= 0.5 * (gap / beta + d * np.log(beta) + d * LOG_2PI)
        total += bound
    return total / n_draws


def ddpm_fit(
    states: np.ndarray,
    actions: np.ndarray,
    rng: np.random.Generator,
    widths=(256, 256),
    n_steps: int = 50,
    steps: int = 4000,
    batch_size: int = 256,
    lr: float = 3e-4,
) -> DdpmBc:
    model = DdpmBc(states.shape[1], actions.shape[1], widths, rng, n_steps=n_steps)
    params = model.params()
    opt = AdamState(params)
    n = actions.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        zero_grads(params)
        loss = ddpm_loss(model, states[idx], actions[idx], rng)
        loss.backward()
        adam_step(params, opt, lr=lr)
    return model
