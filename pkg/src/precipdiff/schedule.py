"""Diffusion noise schedules.

All per-step arrays have length ``T + 1`` and are indexed by the diffusion
step ``t = 1..T``. Index 0 holds the clean-data convention
(``beta[0] = 0``, ``alpha_bar[0] = 1``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02
DEFAULT_COSINE_S = 0.008
COSINE_BETA_CLAMP = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar, self.sigma):
            arr.setflags(write=False)

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T) or np.any(t != np.round(t)):
            raise ValueError(f"diffusion step must be an integer in [1, {self.T}], got {t}")


def _from_betas(betas: np.ndarray, kind: str, params: dict) -> NoiseSchedule:
    T = betas.size
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma=np.sqrt(beta),
        kind=kind,
        params=params,
    )


def linear_schedule(T: int, beta_min: float = DEFAULT_BETA_MIN, beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    """Betas interpolated linearly from ``beta_min`` (step 1) to ``beta_max`` (step T)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if T == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        i = np.arange(T, dtype=np.float64)
        betas = beta_min + i / (T - 1) * (beta_max - beta_min)
    return _from_betas(betas, "linear", {"beta_min": beta_min, "beta_max": beta_max})


def cosine_alpha_bar(T: int, s: float = DEFAULT_COSINE_S) -> np.ndarray:
    """Unclamped cumulative signal levels for j = 0..T."""
    tj = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((tj + s) / (1.0 + s) * np.pi / 2) ** 2
    return f / f[0]


def cosine_schedule(T: int, s: float = DEFAULT_COSINE_S) -> NoiseSchedule:
    """Cosine schedule; betas clamped to <= 0.999 and alpha_bar rebuilt by product."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if s <= 0:
        raise ValueError(f"offset s must be positive, got {s}")
    ab = cosine_alpha_bar(T, s)
    betas = np.minimum(1.0 - ab[1:] / ab[:-1], COSINE_BETA_CLAMP)
    return _from_betas(betas, "cosine", {"s": s})


def make_schedule(kind: str, T: int, **params) -> NoiseSchedule:
    if kind == "linear":
        return linear_schedule(T, params.get("beta_min", DEFAULT_BETA_MIN), params.get("beta_max", DEFAULT_BETA_MAX))
    if kind == "cosine":
        return cosine_schedule(T, params.get("s", DEFAULT_COSINE_S))
    raise ValueError(f"unknown schedule kind {kind!r}")
