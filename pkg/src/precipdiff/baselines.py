"""Non-learned gap-filling references: temporal linear interpolation and Laplace fill."""

from __future__ import annotations

import logging

import numpy as np

from .condition import MISSING

log = logging.getLogger(__name__)

JACOBI_TOL = 1e-6
JACOBI_MAX_ITER = 10_000


def tli(xbar: np.ndarray) -> np.ndarray:
    """Temporal linear interpolation per pixel along the frame axis (-3).

    Interior gaps are interpolated between the nearest observed frames;
    leading and trailing gaps hold the nearest observed value, so a pixel
    seen once is constant in time. Pixels never observed stay at -1.
    """
    x = np.asarray(xbar, dtype=np.float64)
    if x.ndim < 3:
        raise ValueError(f"expected (..., L, H, W), got {x.shape}")
    v = np.moveaxis(x, -3, 0)
    L = v.shape[0]
    obs = v != MISSING
    idx = np.arange(L).reshape((L,) + (1,) * (v.ndim - 1))

    prev_i = np.maximum.accumulate(np.where(obs, idx, -1), axis=0)
    next_i = np.minimum.accumulate(np.where(obs, idx, L)[::-1], axis=0)[::-1]
    has_prev, has_next = prev_i >= 0, next_i < L
    pv = np.take_along_axis(v, np.clip(prev_i, 0, L - 1), axis=0)
    nv = np.take_along_axis(v, np.clip(next_i, 0, L - 1), axis=0)

    span = np.where(has_prev & has_next & (next_i > prev_i), next_i - prev_i, 1)
    frac = (idx - prev_i) / span
    out = np.where(has_prev & has_next, pv + frac * (nv - pv), np.where(has_prev, pv, nv))
    out = np.where(has_prev | has_next, out, MISSING)
    out = np.where(obs, v, out)
    return np.moveaxis(out, 0, -3)


def _laplace_frame(f: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, int]:
    """Jacobi relaxation of the -1 pixels of one (H, W) frame.

    Longitude (columns) wraps; latitude edges reflect (zero normal derivative).
    """
    hole = f == MISSING
    out = f.copy()
    out[hole] = f[~hole].mean()
    for it in range(1, max_iter + 1):
        up = np.concatenate([out[:1], out[:-1]], axis=0)
        down = np.concatenate([out[1:], out[-1:]], axis=0)
        avg = 0.25 * (up + down + np.roll(out, 1, axis=1) + np.roll(out, -1, axis=1))
        change = np.abs(avg[hole] - out[hole]).max()
        out[hole] = avg[hole]
        if change < tol:
            return out, it
    return out, max_iter


def spatial_fill(x: np.ndarray, tol: float = JACOBI_TOL, max_iter: int = JACOBI_MAX_ITER, return_flags: bool = False):
    """Replace remaining -1 pixels of each frame by the harmonic extension of its observed values.

    Frames with nothing observed are set to 0 and flagged.

    Returns:
        The filled array, plus a boolean array of flagged frames (shape
        ``x.shape[:-2]``) when ``return_flags`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError(f"expected (..., H, W), got {x.shape}")
    out = x.copy()
    flags = np.zeros(x.shape[:-2], dtype=bool)
    for k in np.ndindex(*x.shape[:-2]):
        f = x[k]
        hole = f == MISSING
        if not hole.any():
            continue
        if hole.all():
            flags[k] = True
            out[k] = 0.0
            log.warning("frame %s has no observed pixels; filled with 0", k)
            continue
        out[k], iters = _laplace_frame(f, tol, max_iter)
        if iters == max_iter:
            log.warning("Laplace fill of frame %s stopped at %d iterations", k, max_iter)
    return (out, flags) if return_flags else out


def tli_lf(xbar: np.ndarray, return_flags: bool = False):
    """Temporal interpolation followed by Laplace fill of what is left."""
    return spatial_fill(tli(xbar), return_flags=return_flags)


METHODS = {"tli": tli, "tli-lf": tli_lf}
