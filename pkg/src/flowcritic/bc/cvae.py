"""Conditional VAE behavior cloning.

The encoder maps a (state, action) pair to a diagonal Gaussian over a latent
code, the decoder maps (state, latent) back to a diagonal Gaussian over
actions. Density is score-able only as an evidence lower bound, which is the
point of carrying this model: it is the "density surrogate" whose looseness
shows up when contrasted against exact transport densities on the same data.
"""

from __future__ import annotations

import numpy as np

from ..nn import AdamState, Mlp, Tensor, adam_step, zero_grads
from ..nn.tensor import clip, concat, slice_cols, texp, tsum
from .gaussian import LOG_2PI, LOG_STD_MAX, LOG_STD_MIN


class CvaeBc:
    """Encoder/decoder pair; the latent dimension is twice the action dimension."""

    def __init__(self, state_dim: int, action_dim: int, widths, rng: np.random.Generator):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.latent_dim = 2 * self.action_dim
        self.encoder = Mlp(self.state_dim + self.action_dim, widths, 2 * self.latent_dim, rng=rng)
        self.decoder = Mlp(self.state_dim + self.latent_dim, widths, 2 * self.action_dim, rng=rng)

    def params(self):
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.params().items()})
        return out

    def encode_np(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.encoder.forward_np(np.concatenate([states, actions], axis=1))
        mean = out[:, : self.latent_dim]
        log_std = np.clip(out[:, self.latent_dim :], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def decode_np(self, states: np.ndarray, latents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.decoder.forward_np(np.concatenate([states, latents], axis=1))
        mean = out[:, : self.action_dim]
        log_std = np.clip(out[:, self.action_dim :], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std


def cvae_loss(model: CvaeBc, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Negative ELBO on the tape, single reparameterized latent draw per pair."""
    n = states.shape[0]
    d, dz = model.action_dim, model.latent_dim
    s = np.asarray(states, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)

    enc = model.encoder.forward(Tensor(np.concatenate([s, a], axis=1)))
    z_mean = slice_cols(enc, 0, dz)
    z_log_std = clip(slice_cols(enc, dz, 2 * dz), LOG_STD_MIN, LOG_STD_MAX)
    eps = rng.standard_normal((n, dz))
    z = z_mean + texp(z_log_std) * eps

    # Decoder input mixes constant state columns with the tape-carried latent.
    dec = model.decoder.forward(concat([Tensor(s), z]))
    a_mean = slice_cols(dec, 0, d)
    a_log_std = clip(slice_cols(dec, d, 2 * d), LOG_STD_MIN, LOG_STD_MAX)
    diff = a_mean - Tensor(a)
    recon_terms = diff * diff * texp(a_log_std * (-2.0)) + a_log_std * 2.0 + LOG_2PI
    neg_recon = tsum(recon_terms) * (0.5 / n)

    # KL(N(mu, sigma^2) || N(0, 1)) per coordinate, closed form.
    z_var = texp(z_log_std * 2.0)
    kl_terms = z_var + z_mean * z_mean - 1.0 - z_log_std * 2.0
    kl = tsum(kl_terms) * (0.5 / n)
    return neg_recon + kl


def cvae_elbo(
    model: CvaeBc,
    states: np.ndarray,
    actions: np.ndarray,
    rng: np.random.Generator,
    n_mc: int = 10,
) -> np.ndarray:
    """Per-pair ELBO estimate, reconstruction averaged over n_mc latent draws."""
    s = np.asarray(states, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    z_mean, z_log_std = model.encode_np(s, a)
    z_std = np.exp(z_log_std)
    recon = np.zeros(s.shape[0])
    for _ in range(n_mc):
        z = z_mean + z_std * rng.standard_normal(z_mean.shape)
        a_mean, a_log_std = model.decode_np(s, z)
        diff = a - a_mean
        var = np.exp(2.0 * a_log_std)
        recon += -0.5 * ((diff * diff / var) + 2.0 * a_log_std + LOG_2PI).sum(axis=1)
    recon /= n_mc
    kl = 0.5 * (np.exp(2.0 * z_log_std) + z_mean**2 - 1.0 - 2.0 * z_log_std).sum(axis=1)
    return recon - kl


def cvae_sample(model: CvaeBc, states: np.ndarray, rng: np.random.Generator, clamp: bool = True) -> np.ndarray:
    """Draw a latent from the prior and return the decoder mean."""
    z = rng.standard_normal((states.shape[0], model.latent_dim))
    a_mean, _ = model.decode_np(np.asarray(states, dtype=np.float64), z)
    return np.clip(a_mean, -1.0, 1.0) if clamp else a_mean


def cvae_fit(
    states: np.ndarray,
    actions: np.ndarray,
    rng: np.random.Generator,
    widths=(256, 256),
    steps: int = 3000,
    batch_size: int = 256,
    lr: float = 3e-4,
) -> CvaeBc:
    model = CvaeBc(states.shape[1], actions.shape[1], widths, rng)
    params = model.params()
    opt = AdamState(params)
    n = actions.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        zero_grads(params)
        loss = cvae_loss(model, states[idx], actions[idx], rng)
        loss.backward()
        adam_step(params, opt, lr=lr)
    return model
