"""Adam with decoupled weight decay, and parameter EMA."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Tensor


class NonFiniteGradient(FloatingPointError):
    """Raised when an optimizer step sees a NaN or infinite gradient."""


@dataclass
class AdamState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        st = cls(**kwargs)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """One AdamW update in place. ``None`` gradients are treated as zero."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ValueError("params, grads and optimizer moments must have equal length")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = params[i].name or f"#{i}"
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}; step rejected")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= state.lr * update


@dataclass
class EmaState:
    decay: float = 0.999
    shadow: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in (0, 1), got {self.decay}")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], decay: float = 0.999) -> "EmaState":
        return cls(decay=decay, shadow=[p.data.copy() for p in params])


def ema_update(params: Sequence[Tensor], ema: EmaState) -> None:
    """shadow <- decay * shadow + (1 - decay) * param."""
    if len(ema.shadow) != len(params):
        raise ValueError("EMA shadow does not match parameter list")
    g = ema.decay
    for s, p in zip(ema.shadow, params):
        if s.shape != p.data.shape:
            raise ValueError(f"EMA shadow shape {s.shape} does not match parameter {p.shape}")
        s *= g
        s += (1.0 - g) * p.data
