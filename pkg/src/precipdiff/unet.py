"""Conditional 3D U-Net predicting the diffusion velocity.

Layout: an input DoubleConv and three encoder stages on the noisy field, a
parallel condition encoder of the same depth whose features are added at
every stage, three decoder stages with skip connections, and a 1x1x1 head.
A sinusoidal time embedding feeds a two-layer MLP whose per-stage linear
projections are added as channel biases. ``with_time=False`` drops the time
path entirely (direct-regression variant).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .condition import N_CHANNELS, cond_dropout
from .tensor import (
    Tensor,
    adaptive_avg_pool3d,
    concat,
    conv3d,
    conv_transpose3d,
    dropout3d,
    group_norm,
    linear,
    maxpool3d,
    no_grad,
    sigmoid,
    silu,
)

POOL = (1, 2, 2)
N_LEVELS = 3


def gn_groups(channels: int) -> int:
    return max(4, min(32, channels // 4))


def se_hidden(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    cond_channels: int = N_CHANNELS
    base_channels: int = 16
    multipliers: tuple[int, ...] = (1, 2, 4, 8)
    t_kernel: int = 3
    s_kernel: int = 3
    se_reduction: int = 16
    time_dim: int = 128
    time_hidden: int = 512
    dropout: float = 0.0
    p_drop: float = 0.2
    with_time: bool = True

    def __post_init__(self):
        object.__setattr__(self, "multipliers", tuple(int(m) for m in self.multipliers))
        if len(self.multipliers) != N_LEVELS + 1:
            raise ValueError(f"need {N_LEVELS + 1} channel multipliers, got {self.multipliers}")
        if any(b <= a for a, b in zip(self.multipliers, self.multipliers[1:])):
            raise ValueError(f"channel multipliers must be strictly increasing, got {self.multipliers}")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ValueError(f"base_channels must be a positive multiple of 4, got {self.base_channels}")
        for c in self.channels:
            if c % gn_groups(c):
                raise ValueError(f"{c} channels cannot be split into {gn_groups(c)} norm groups")
        if self.t_kernel % 2 == 0 or self.s_kernel % 2 == 0:
            raise ValueError("kernel extents must be odd")
        if self.time_dim % 2:
            raise ValueError(f"time_dim must be even, got {self.time_dim}")
        if not 0.0 <= self.p_drop <= 1.0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout probabilities out of range")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.multipliers)

    @property
    def kernel(self) -> tuple[int, int, int]:
        return (self.t_kernel, self.s_kernel, self.s_kernel)

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """(B, dim) embedding: ``[sin(t f_i), cos(t f_i)]`` over a geometric frequency ladder."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class _Init:
    """Parameter factory with uniform fan-in initialisation."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def _add(self, name: str, data: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def uniform(self, name: str, shape, fan_in: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def const(self, name: str, shape, value: float) -> None:
        self._add(name, np.full(shape, value, dtype=np.float64))

    def conv(self, name: str, cin: int, cout: int, kernel) -> None:
        fan = cin * int(np.prod(kernel))
        self.uniform(f"{name}.weight", (cout, cin) + tuple(kernel), fan)
        self.uniform(f"{name}.bias", (cout,), fan)

    def conv_t(self, name: str, cin: int, cout: int, kernel) -> None:
        fan = cout * int(np.prod(kernel))
        self.uniform(f"{name}.weight", (cin, cout) + tuple(kernel), fan)
        self.uniform(f"{name}.bias", (cout,), fan)

    def linear(self, name: str, fin: int, fout: int) -> None:
        self.uniform(f"{name}.weight", (fout, fin), fin)
        self.uniform(f"{name}.bias", (fout,), fin)

    def norm(self, name: str, c: int) -> None:
        self.const(f"{name}.weight", (c,), 1.0)
        self.const(f"{name}.bias", (c,), 0.0)

    def double_conv(self, name: str, cin: int, cout: int, cfg: UNetConfig) -> None:
        self.conv(f"{name}.conv1", cin, cout, cfg.kernel)
        self.norm(f"{name}.norm1", cout)
        self.conv(f"{name}.conv2", cout, cout, cfg.kernel)
        self.norm(f"{name}.norm2", cout)
        hidden = se_hidden(cout, cfg.se_reduction)
        self.linear(f"{name}.se1", cout, hidden)
        self.linear(f"{name}.se2", hidden, cout)


def _bias5(v: Tensor) -> Tensor:
    return v.reshape(v.shape[0], v.shape[1], 1, 1, 1)


def double_conv3d(x: Tensor, p, name: str, cfg: UNetConfig, rng: Optional[np.random.Generator] = None) -> Tensor:
    """(conv -> GroupNorm -> SiLU) twice, then a squeeze-and-excitation channel gate."""
    pad = tuple(k // 2 for k in cfg.kernel)
    for i in (1, 2):
        x = conv3d(x, p[f"{name}.conv{i}.weight"], p[f"{name}.conv{i}.bias"], padding=pad)
        x = group_norm(x, gn_groups(x.shape[1]), p[f"{name}.norm{i}.weight"], p[f"{name}.norm{i}.bias"])
        x = dropout3d(silu(x), cfg.dropout, rng)
    s = adaptive_avg_pool3d(x)
    s = s.reshape(s.shape[0], s.shape[1])
    s = silu(linear(s, p[f"{name}.se1.weight"], p[f"{name}.se1.bias"]))
    gate = sigmoid(linear(s, p[f"{name}.se2.weight"], p[f"{name}.se2.bias"]))
    return x * _bias5(gate)


def encoder_block(x: Tensor, p, name: str, cfg: UNetConfig, rng=None) -> Tensor:
    return double_conv3d(maxpool3d(x, POOL), p, name, cfg, rng)


def decoder_block(x: Tensor, skip: Tensor, p, name: str, cfg: UNetConfig, rng=None) -> Tensor:
    up = conv_transpose3d(x, p[f"{name}.up.weight"], p[f"{name}.up.bias"], stride=POOL)
    if up.shape != skip.shape:
        raise ValueError(f"{name}: upsampled {up.shape} does not match skip {skip.shape}")
    return double_conv3d(concat([up, skip], axis=1), p, f"{name}.conv", cfg, rng)


STAGES = ("inc", "enc1", "enc2", "enc3", "dec1", "dec2", "dec3")


class UNet3D:
    """The denoiser ``v(x_t, t, cond)``.

    Args:
        config: architecture settings.
        seed: seed for initialisation (ignored when ``params`` is given).
        params: optional mapping of parameter arrays to load.
    """

    def __init__(self, config: UNetConfig = UNetConfig(), seed: int = 0, params=None):
        self.config = config
        init = _Init(np.random.default_rng(seed))
        c = config.channels
        init.double_conv("inc", config.in_channels, c[0], config)
        for k in range(N_LEVELS):
            init.double_conv(f"enc{k + 1}", c[k], c[k + 1], config)
        for k in range(N_LEVELS):
            hi, lo = c[N_LEVELS - k], c[N_LEVELS - k - 1]
            init.conv_t(f"dec{k + 1}.up", hi, lo, POOL)
            init.double_conv(f"dec{k + 1}.conv", 2 * lo, lo, config)
        init.conv("head", c[0], 1, (1, 1, 1))
        init.double_conv("cond_inc", config.cond_channels, c[0], config)
        for k in range(N_LEVELS):
            init.double_conv(f"cond_enc{k + 1}", c[k], c[k + 1], config)
        if config.with_time:
            init.linear("time.fc1", config.time_dim, config.time_hidden)
            init.linear("time.fc2", config.time_hidden, config.time_hidden)
            for name, ch in zip(STAGES, self.stage_channels):
                init.linear(f"time.proj_{name}", config.time_hidden, ch)
        self.params = init.params
        if params is not None:
            self.load_params(params)

    @property
    def stage_channels(self) -> tuple[int, ...]:
        c = self.config.channels
        return (c[0], c[1], c[2], c[3], c[2], c[1], c[0])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_params(self, arrays) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter names differ: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for k, p in self.params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {a.shape} does not match {p.shape}")
            p.data[...] = a

    def time_features(self, t) -> dict[str, Tensor]:
        """Per-stage additive ``(B, C, 1, 1, 1)`` time biases; empty without a time path."""
        if not self.config.with_time:
            return {}
        p = self.params
        g = Tensor(sinusoidal_embedding(t, self.config.time_dim))
        g = silu(linear(g, p["time.fc1.weight"], p["time.fc1.bias"]))
        g = linear(g, p["time.fc2.weight"], p["time.fc2.bias"])
        return {s: _bias5(linear(g, p[f"time.proj_{s}.weight"], p[f"time.proj_{s}.bias"])) for s in STAGES}

    def _check_inputs(self, x: Tensor, cond: np.ndarray) -> None:
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"input must be (B, {self.config.in_channels}, L, H, W), got {x.shape}")
        H, W = x.shape[3], x.shape[4]
        if H % 8 or W % 8:
            raise ValueError(f"height {H} and width {W} must be divisible by 8")
        expect = (x.shape[0], self.config.cond_channels) + x.shape[2:]
        if cond.shape != expect:
            raise ValueError(f"condition has shape {cond.shape}, expected {expect}")

    def forward(self, x, t, cond, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Velocity prediction ``(B, 1, L, H, W)``.

        In train mode, with ``p_drop > 0`` and an ``rng``, one condition group
        per sample is blanked with probability ``p_drop``.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        cond = cond.data if isinstance(cond, Tensor) else np.asarray(cond, dtype=np.float64)
        self._check_inputs(x, cond)
        cfg, p = self.config, self.params
        drop_rng = rng if train else None
        if train and cfg.p_drop > 0 and rng is not None:
            cond = cond_dropout(cond, cfg.p_drop, rng)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        tf = self.time_features(t)

        def plus(h: Tensor, stage: str, z: Tensor) -> Tensor:
            h = h + z
            return h + tf[stage] if stage in tf else h

        z = [double_conv3d(Tensor(cond), p, "cond_inc", cfg, drop_rng)]
        for k in range(N_LEVELS):
            z.append(encoder_block(z[-1], p, f"cond_enc{k + 1}", cfg, drop_rng))

        h = [plus(double_conv3d(x, p, "inc", cfg, drop_rng), "inc", z[0])]
        for k in range(N_LEVELS):
            h.append(plus(encoder_block(h[-1], p, f"enc{k + 1}", cfg, drop_rng), f"enc{k + 1}", z[k + 1]))

        u = h[N_LEVELS]
        for k in range(N_LEVELS):
            lvl = N_LEVELS - 1 - k
            u = plus(decoder_block(u, h[lvl], p, f"dec{k + 1}", cfg, drop_rng), f"dec{k + 1}", z[lvl])
        return conv3d(u, p["head.weight"], p["head.bias"])

    def predict(self, x, t, cond) -> np.ndarray:
        """Deterministic eval-mode forward without building a graph."""
        with no_grad():
            return self.forward(x, t, cond, train=False).data

    __call__ = predict


def parameter_count(config: UNetConfig) -> int:
    return UNet3D(config).num_parameters()
