"""Forward noising, v-prediction algebra, training steps and masked samplers.

Fields are handled batch-first as ``(B, L, H, W)``; a single ``(L, H, W)``
volume is accepted where noted. Models see ``(B, 1, L, H, W)`` inputs and
the full ten-channel condition ``(B, 10, L, H, W)``.

Two model interfaces are used:

* samplers take any callable ``denoiser(x, t, cond) -> ndarray`` returning a
  ``(B, 1, L, H, W)`` array (``UNet3D`` instances qualify);
* training steps need ``model.forward(x, t, cond, train=True, rng=...)``
  returning a :class:`Tensor` plus ``model.parameters()``.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .condition import GridSpec, drop_groups, full_condition, mask_apply
from .schedule import NoiseSchedule
from .tensor import AdamState, EmaState, Tensor, adam_step, ema_update, square, tabs

Denoiser = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

LAT_WEIGHT_FLOOR = 0.01
DDIM_STEPS = 50
# flow time s in [0, 1] is fed to the network on the same scale as diffusion steps
RF_TIME_SCALE = 1000.0


class NonFiniteLoss(FloatingPointError):
    """Raised when a training loss is NaN or infinite."""


def lat_weight(grid: GridSpec, eps: float = LAT_WEIGHT_FLOOR) -> np.ndarray:
    """Per-row loss weight ``eps + (1 - eps) cos(lat) / mean(cos(lat))``; mean is 1."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"latitude weight floor must lie in [0, 1], got {eps}")
    c = np.clip(np.cos(grid.lat), 0.0, None)
    return eps + (1.0 - eps) * c / c.mean()


def _coef(values: np.ndarray, t, ndim: int) -> np.ndarray:
    """Gather per-sample schedule values and shape them for broadcasting over a batch."""
    t = np.asarray(t)
    if t.ndim == 0:
        return np.asarray(values[int(t)])
    return values[t.astype(int)].reshape((-1,) + (1,) * (ndim - 1))


def forward_sample(x0: np.ndarray, t, sched: NoiseSchedule, rng: np.random.Generator, eps=None):
    """Noise ``x0`` to step ``t``; returns ``(x_t, eps)`` with the exact noise used.

    ``t`` is a scalar or one step per batch row.
    """
    sched.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    ab = _coef(sched.alpha_bar, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def v_target(x0, eps, t, sched: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    ab = _coef(sched.alpha_bar, t, x0.ndim)
    return np.sqrt(ab) * eps - np.sqrt(1.0 - ab) * x0


def reconstruct(x_t, v_hat, t, sched: NoiseSchedule):
    """Recover ``(eps_hat, x0_hat)`` from a velocity prediction at step ``t``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = _coef(sched.alpha_bar, t, x_t.ndim)
    if np.any(ab <= 0):
        raise ValueError("cannot reconstruct x0 where alpha_bar is 0")
    eps_hat = np.sqrt(ab) * v_hat + np.sqrt(1.0 - ab) * x_t
    x0_hat = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return eps_hat, x0_hat


def ancestral_step(x_t, v_hat, t: int, sched: NoiseSchedule, z) -> np.ndarray:
    """One reverse step ``x_t -> x_{t-1}``; the noise ``z`` is ignored at ``t = 1``."""
    eps_hat, _ = reconstruct(x_t, v_hat, t, sched)
    a, ab, b = sched.alpha[t], sched.alpha_bar[t], sched.beta[t]
    mean = (x_t - b / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
    if t == 1:
        return mean
    return mean + math.sqrt(b) * z


def ddim_timesteps(T: int, n_steps: int = DDIM_STEPS) -> np.ndarray:
    """Descending, uniformly strided subset of ``1..T`` starting at ``T``."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"DDIM step count must lie in [1, {T}], got {n_steps}")
    steps = np.round(np.linspace(T, 0, n_steps + 1)[:-1]).astype(int)
    return np.unique(steps)[::-1]


def ddim_step(x_t, v_hat, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) jump from ``t`` to ``t_prev``; ``t_prev = 0`` returns ``x0_hat``."""
    eps_hat, x0_hat = reconstruct(x_t, v_hat, t, sched)
    ab_prev = sched.alpha_bar[t_prev]
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def _batched(*arrays):
    """Promote single volumes to a batch of one; report whether that happened."""
    single = np.ndim(arrays[0]) == 3
    out = [np.asarray(a, dtype=np.float64)[None] if single else np.asarray(a, dtype=np.float64) for a in arrays]
    return single, out


def _check_masked_input(xbar0: np.ndarray, mask: np.ndarray) -> None:
    if xbar0.shape != mask.shape:
        raise ValueError(f"masked field {xbar0.shape} and mask {mask.shape} differ in shape")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    if not np.array_equal(xbar0 == -1.0, mask == 0):
        bad = int(np.count_nonzero((xbar0 == -1.0) != (mask == 0)))
        raise ValueError(f"sentinel -1 does not line up with mask == 0 at {bad} pixels")


def _predict(model: Denoiser, x: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
    tt = np.full(x.shape[0], float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
    out = np.asarray(model(x[:, None], tt, cond))
    if out.shape != (x.shape[0], 1) + x.shape[1:]:
        raise ValueError(f"denoiser returned shape {out.shape}, expected {(x.shape[0], 1) + x.shape[1:]}")
    return out[:, 0]


def masked_sample(
    xbar0: np.ndarray,
    mask: np.ndarray,
    cond: np.ndarray,
    model: Denoiser,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    sampler: str = "ancestral",
    n_steps: int = DDIM_STEPS,
    drop: Sequence[str] = (),
    on_step: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Inpaint the ``mask == 0`` pixels of ``xbar0``.

    Args:
        xbar0: masked field(s), -1 exactly where ``mask == 0``.
        mask: observation mask, 1 = observed.
        cond: auxiliary condition channels, ``(B, 8, L, H, W)``.
        model: denoiser callable predicting v.
        sched: noise schedule.
        rng: source of the initial noise and ancestral noise.
        sampler: ``"ancestral"`` (all T steps) or ``"ddim"``.
        n_steps: DDIM step count.
        drop: channel groups forced to -1 before sampling (ablation).
        on_step: called as ``on_step(t, x)`` after each enforced step.

    Returns:
        Completed field(s), same shape as ``xbar0``.
    """
    single, (xbar0, mask) = _batched(xbar0, mask)
    cond = np.asarray(cond, dtype=np.float64)
    if single:
        cond = cond[None]
    _check_masked_input(xbar0, mask)
    cbar = drop_groups(full_condition(xbar0, mask, cond), drop)
    observed = mask == 1
    x = np.where(observed, xbar0, rng.standard_normal(xbar0.shape))

    if sampler == "ancestral":
        for t in range(sched.T, 0, -1):
            v = _predict(model, x, t, cbar)
            z = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
            x = np.where(observed, xbar0, ancestral_step(x, v, t, sched, z))
            if on_step is not None:
                on_step(t, x)
    elif sampler == "ddim":
        steps = ddim_timesteps(sched.T, n_steps)
        for t, t_prev in zip(steps, np.append(steps[1:], 0)):
            v = _predict(model, x, t, cbar)
            x = np.where(observed, xbar0, ddim_step(x, v, int(t), int(t_prev), sched))
            if on_step is not None:
                on_step(int(t), x)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return x[0] if single else x


def _weighted(diff: Tensor, lat_w: np.ndarray) -> Tensor:
    return diff * Tensor(np.asarray(lat_w, dtype=np.float64).reshape(1, 1, 1, -1, 1))


def weighted_mse(pred: Tensor, target: np.ndarray, lat_w: np.ndarray) -> Tensor:
    """``mean((w * (pred - target))**2)`` with ``w`` varying along the row axis."""
    return square(_weighted(pred - Tensor(target), lat_w)).mean()


def weighted_l1(pred: Tensor, target: np.ndarray, lat_w: np.ndarray) -> Tensor:
    return tabs(_weighted(pred - Tensor(target), lat_w)).mean()


def _optimize(loss: Tensor, model, opt: AdamState, ema: Optional[EmaState]) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteLoss(f"training loss is {value} at optimizer step {opt.step}")
    params = model.parameters()
    for p in params:
        p.zero_grad()
    if loss.requires_grad:
        loss.backward()
    adam_step(params, [p.grad for p in params], opt)
    if ema is not None:
        ema_update(params, ema)
    return value


def _train_inputs(x0, mask, cond):
    x0 = np.asarray(x0, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if x0.ndim != 4:
        raise ValueError(f"training batch must be (B, L, H, W), got {x0.shape}")
    if np.any(x0 < 0) or np.any(x0 > 1):
        raise ValueError("training targets must be complete fields in [0, 1]")
    xbar0 = mask_apply(x0, mask)
    return x0, mask, xbar0, full_condition(xbar0, mask, cond)


def train_step(x0, mask, cond, model, sched: NoiseSchedule, opt: AdamState, ema: Optional[EmaState], lat_w, rng) -> float:
    """One v-prediction update with the latitude-weighted squared error; returns the loss."""
    x0, mask, _, cbar = _train_inputs(x0, mask, cond)
    t = rng.integers(1, sched.T + 1, size=x0.shape[0])
    x_t, eps = forward_sample(x0, t, sched, rng)
    v = v_target(x0, eps, t, sched)
    v_hat = model.forward(Tensor(x_t[:, None]), t.astype(np.float64), cbar, train=True, rng=rng)
    loss = weighted_mse(v_hat, v[:, None], lat_w)
    return _optimize(loss, model, opt, ema)


def rf_train_step(x1, mask, cond, model, opt: AdamState, ema: Optional[EmaState], lat_w, rng) -> float:
    """One rectified-flow update: regress the straight-path velocity ``x1 - x0``."""
    x1, mask, _, cbar = _train_inputs(x1, mask, cond)
    s = rng.random(x1.shape[0])
    noise = rng.standard_normal(x1.shape)
    sb = s.reshape(-1, 1, 1, 1)
    x_s = (1.0 - sb) * noise + sb * x1
    v_hat = model.forward(Tensor(x_s[:, None]), s * RF_TIME_SCALE, cbar, train=True, rng=rng)
    loss = weighted_mse(v_hat, (x1 - noise)[:, None], lat_w)
    return _optimize(loss, model, opt, ema)


def rk4_integrate(f: Callable[[np.ndarray, float], np.ndarray], x: np.ndarray, n_steps: int) -> np.ndarray:
    """Fixed-step classical Runge-Kutta for ``dx/ds = f(x, s)`` from s = 0 to 1."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    h = 1.0 / n_steps
    for i in range(n_steps):
        s = i * h
        k1 = f(x, s)
        k2 = f(x + 0.5 * h * k1, s + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, s + 0.5 * h)
        k4 = f(x + h * k3, s + h)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def euler_integrate(f: Callable[[np.ndarray, float], np.ndarray], x: np.ndarray, n_steps: int) -> np.ndarray:
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    h = 1.0 / n_steps
    for i in range(n_steps):
        x = x + h * f(x, i * h)
    return x


def rf_sample(
    xbar0, mask, cond, model: Denoiser, n_steps: int, rng: np.random.Generator, drop: Sequence[str] = ()
) -> np.ndarray:
    """Integrate the learned flow from noise with RK4, then restore observed pixels."""
    single, (xbar0, mask) = _batched(xbar0, mask)
    cond = np.asarray(cond, dtype=np.float64)
    if single:
        cond = cond[None]
    _check_masked_input(xbar0, mask)
    cbar = drop_groups(full_condition(xbar0, mask, cond), drop)
    f = lambda x, s: _predict(model, x, s * RF_TIME_SCALE, cbar)
    x = rk4_integrate(f, rng.standard_normal(xbar0.shape), n_steps)
    x = np.where(mask == 1, xbar0, x)
    return x[0] if single else x


def supervised_train_step(x0, mask, cond, model, opt: AdamState, ema: Optional[EmaState], lat_w, rng) -> float:
    """One update of the direct-regression U-Net with a latitude-weighted L1 loss."""
    x0, mask, xbar0, cbar = _train_inputs(x0, mask, cond)
    pred = model.forward(Tensor(xbar0[:, None]), np.zeros(x0.shape[0]), cbar, train=True, rng=rng)
    loss = weighted_l1(pred, x0[:, None], lat_w)
    return _optimize(loss, model, opt, ema)


def supervised_predict(xbar0, mask, cond, model: Denoiser, drop: Sequence[str] = ()) -> np.ndarray:
    single, (xbar0, mask) = _batched(xbar0, mask)
    cond = np.asarray(cond, dtype=np.float64)
    if single:
        cond = cond[None]
    _check_masked_input(xbar0, mask)
    cbar = drop_groups(full_condition(xbar0, mask, cond), drop)
    x = np.where(mask == 1, xbar0, _predict(model, xbar0, 0.0, cbar))
    return x[0] if single else x
