"""Noise schedule and one-step latent enhancement algebra.

Timesteps are 1-based: ``t`` in ``[1, T]`` indexes ``alpha_bar[t - 1]``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

Denoise = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.beta, self.alpha_bar):
            arr.setflags(write=False)

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def abar(self, t: int) -> float:
        return float(self.alpha_bar[self.check_timestep(t) - 1])

    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.alpha_bar, dtype="<f8").tobytes()).hexdigest()


def build_schedule(T: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2,
                   kind: str = "scaled_linear") -> DiffusionSchedule:
    if kind != "scaled_linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T, dtype=np.float64) ** 2
    alpha_bar = np.cumprod(1.0 - beta)
    return DiffusionSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(z: torch.Tensor, t: int, eps: torch.Tensor, s: DiffusionSchedule) -> torch.Tensor:
    """Sample ``z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps``."""
    _check_shapes(z, eps)
    ab = s.abar(t)
    return ab ** 0.5 * z + (1.0 - ab) ** 0.5 * eps


def predict_clean(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, s: DiffusionSchedule) -> torch.Tensor:
    _check_shapes(z_t, eps_hat)
    ab = s.abar(t)
    return (z_t - (1.0 - ab) ** 0.5 * eps_hat) / ab ** 0.5


def fda_scale(z: torch.Tensor, gamma: float) -> torch.Tensor:
    return gamma * z


def fda_unscale(z: torch.Tensor, gamma: float) -> torch.Tensor:
    return z / gamma


@dataclass(frozen=True)
class GleConfig:
    gamma: float = 5.0
    timestep: int = 1000

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.timestep < 1:
            raise ValueError("timestep must be >= 1")


def gle_enhance(z_L: torch.Tensor, denoiser: Denoise, cfg: GleConfig, s: DiffusionSchedule) -> torch.Tensor:
    """One-step enhancement of a low-quality latent.

    The latent is scaled by ``gamma`` before the denoiser sees it and the
    clean prediction is divided by ``gamma`` afterwards. The denoiser is
    called exactly once; ``z_L`` is not modified.
    """
    t = s.check_timestep(cfg.timestep)
    x = fda_scale(z_L, cfg.gamma)
    eps = denoiser(x, t)
    if not torch.isfinite(eps).all():
        raise FloatingPointError(f"denoiser returned non-finite values at timestep {t}")
    return fda_unscale(predict_clean(x, eps, t, s), cfg.gamma)
