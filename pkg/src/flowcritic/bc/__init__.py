"""Behavior-cloning models used as density baselines and comparison points."""

from .cvae import CvaeBc, cvae_elbo, cvae_fit, cvae_loss, cvae_sample
from .ddpm import BETA_MAX, BETA_MIN, DdpmBc, ddpm_elbo, ddpm_fit, ddpm_loss, ddpm_sample, noise_schedule
from .gaussian import GaussianBc, gaussian_fit, gaussian_logpdf, gaussian_nll_loss

__all__ = [
    "BETA_MAX",
    "BETA_MIN",
    "CvaeBc",
    "DdpmBc",
    "GaussianBc",
    "cvae_elbo",
    "cvae_fit",
    "cvae_loss",
    "cvae_sample",
    "ddpm_elbo",
    "ddpm_fit",
    "ddpm_loss",
    "ddpm_sample",
    "gaussian_fit",
    "gaussian_logpdf",
    "gaussian_nll_loss",
    "noise_schedule",
]
