"""Condition tensor construction, data transforms, masking and augmentation.

Every valid value handed to the network lies in [0, 1]; missing or masked
entries carry the sentinel ``MISSING`` (-1). The ten condition channels are,
in order::

    0 masked precipitation     5 topography
    1 mask (1 = to inpaint)    6 (cos lat + 1) / 2
    2 IR band 1                7 (sin lat + 1) / 2
    3 IR band 2                8 (sin lon + 1) / 2
    4 time embedding           9 (cos lon + 1) / 2
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

MISSING = -1.0

CHANNEL_NAMES = (
    "masked_precip",
    "mask",
    "ir1",
    "ir2",
    "time",
    "topo",
    "cos_lat",
    "sin_lat",
    "sin_lon",
    "cos_lon",
)
N_CHANNELS = len(CHANNEL_NAMES)

# Ablation / dropout units; multi-channel inputs are removed together.
CHANNEL_GROUPS: dict[str, tuple[int, ...]] = {
    "masked_precip": (0,),
    "mask": (1,),
    "ir": (2, 3),
    "time": (4,),
    "topo": (5,),
    "lat": (6, 7),
    "lon": (8, 9),
}
GROUP_NAMES = tuple(CHANNEL_GROUPS)

SECONDS_PER_DAY = 86400.0
TIME_CYCLES_DAYS = (7.0, 30.0, 365.0, 3650.0, 36500.0)
IR_COVERAGE_DEG = 60.0


@dataclass(frozen=True)
class GridSpec:
    """Regular lat/lon grid: rows from the south pole to the north pole."""

    L: int
    H: int
    W: int

    def __post_init__(self):
        if self.L < 1 or self.H < 2 or self.W < 2:
            raise ValueError(f"grid needs L >= 1, H >= 2, W >= 2; got {(self.L, self.H, self.W)}")

    @property
    def lat(self) -> np.ndarray:
        return -np.pi / 2 + np.arange(self.H) / (self.H - 1) * np.pi

    @property
    def lon(self) -> np.ndarray:
        return -np.pi + np.arange(self.W) / (self.W - 1) * 2 * np.pi

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.L, self.H, self.W)


@dataclass(frozen=True)
class ExpTransform:
    """Precipitation squashing y = 1 - exp(-x / k), with k set so that T(x_p) = p_s."""

    x_p: float = 5.0
    p_s: float = 0.99

    @property
    def k(self) -> float:
        return self.x_p / -math.log(1.0 - self.p_s)


def exp_forward(x, tf: ExpTransform = ExpTransform()) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("exp_forward expects non-negative precipitation")
    return -np.expm1(-x / tf.k)


def exp_inverse(y, tf: ExpTransform = ExpTransform()) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y >= 1.0):
        raise ValueError("exp_inverse is undefined for y >= 1")
    return -tf.k * np.log1p(-y)


@dataclass(frozen=True)
class LogisticTransform:
    """Logistic map with S(x_high) = s_high and S(x_low) = s_low.

    The threshold pair may be "reversed" (x_high < x_low), as for IR
    brightness temperature where colder means cloudier.
    """

    x_low: float
    x_high: float
    s_low: float = 0.2
    s_high: float = 0.8

    @property
    def steepness(self) -> float:
        logit = lambda p: math.log(p / (1.0 - p))
        return (logit(self.s_high) - logit(self.s_low)) / (self.x_high - self.x_low)


IR_TRANSFORM = LogisticTransform(x_low=270.0, x_high=230.0)
TOPO_TRANSFORM = LogisticTransform(x_low=200.0, x_high=2000.0)


def logistic_forward(x, tf: LogisticTransform, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """S(x) on valid entries, MISSING elsewhere. NaN inputs count as missing."""
    x = np.asarray(x, dtype=np.float64)
    ok = np.isfinite(x)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    mid = 0.5 * (tf.x_high + tf.x_low)
    z = np.where(ok, x, mid)
    y = 1.0 / (1.0 + np.exp(-tf.steepness * (z - mid)))
    return np.where(ok, y, MISSING)


def mask_apply(x0: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Keep observed pixels (m == 1), set the rest to MISSING."""
    x0 = np.asarray(x0, dtype=np.float64)
    m = np.asarray(m)
    if x0.shape != m.shape:
        raise ValueError(f"field {x0.shape} and mask {m.shape} differ in shape")
    return np.where(m == 1, x0, MISSING)


def gsmap_mask_from_flags(flag_map: np.ndarray, rate_map: np.ndarray) -> np.ndarray:
    """Observation mask from GSMaP-style rasters.

    A pixel is invalid (0) when its satellite info flag is <= 1 or its
    hourly rate is negative; valid pixels are 1.
    """
    flag_map = np.asarray(flag_map)
    rate_map = np.asarray(rate_map)
    if flag_map.shape != rate_map.shape:
        raise ValueError(f"flag map {flag_map.shape} and rate map {rate_map.shape} differ in shape")
    invalid = (flag_map <= 1) | (rate_map < 0)
    return (~invalid).astype(np.float64)


@dataclass(frozen=True)
class TimeEmbedSpec:
    tau0: float = 0.0
    cycles: tuple[float, ...] = field(default=TIME_CYCLES_DAYS)


def time_vector(tau: float, spec: TimeEmbedSpec = TimeEmbedSpec()) -> np.ndarray:
    """The 10-vector [sin', cos'] per cycle, each in [0, 1]."""
    d = (tau - spec.tau0) / SECONDS_PER_DAY
    out = []
    for c in spec.cycles:
        ang = 2 * np.pi * d / c
        out += [(np.sin(ang) + 1) / 2, (np.cos(ang) + 1) / 2]
    return np.array(out)


def time_embedding(taus: Sequence[float], spec: TimeEmbedSpec, grid: GridSpec) -> np.ndarray:
    """One (1, L, H, W) channel: each frame's vector tiled down the rows, replicated across columns."""
    taus = np.asarray(taus, dtype=np.float64).reshape(-1)
    if taus.size != grid.L:
        raise ValueError(f"expected {grid.L} frame times, got {taus.size}")
    out = np.empty((1, grid.L, grid.H, grid.W))
    reps = math.ceil(grid.H / (2 * len(spec.cycles)))
    for n, tau in enumerate(taus):
        col = np.tile(time_vector(tau, spec), reps)[: grid.H]
        out[0, n] = col[:, None]
    return out


def latlon_channels(grid: GridSpec) -> np.ndarray:
    """(4, L, H, W): cos lat, sin lat, sin lon, cos lon, each mapped to [0, 1]."""
    lat, lon = grid.lat, grid.lon
    shape = grid.shape
    maps = [
        np.broadcast_to(((np.cos(lat) + 1) / 2)[:, None], (grid.H, grid.W)),
        np.broadcast_to(((np.sin(lat) + 1) / 2)[:, None], (grid.H, grid.W)),
        np.broadcast_to(((np.sin(lon) + 1) / 2)[None, :], (grid.H, grid.W)),
        np.broadcast_to(((np.cos(lon) + 1) / 2)[None, :], (grid.H, grid.W)),
    ]
    return np.stack([np.broadcast_to(m, shape) for m in maps]).copy()


def ir_coverage_rows(grid: GridSpec, limit_deg: float = IR_COVERAGE_DEG) -> np.ndarray:
    """Boolean per row: True where the IR product has data (|lat| <= limit)."""
    return np.abs(np.degrees(grid.lat)) <= limit_deg + 1e-9


def assemble_condition(
    xbar0: np.ndarray,
    m: np.ndarray,
    ir1: np.ndarray,
    ir2: np.ndarray,
    time_ch: np.ndarray,
    topo: np.ndarray,
    grid: GridSpec,
) -> np.ndarray:
    """Stack the ten condition channels into a (10, L, H, W) array.

    ``m`` is the observation mask (1 = observed); channel 1 stores its
    complement. ``topo`` may be (H, W) and is repeated over frames.
    """
    shape = grid.shape
    named = {"xbar0": xbar0, "m": m, "ir1": ir1, "ir2": ir2}
    for name, arr in named.items():
        if np.shape(arr) != shape:
            raise ValueError(f"channel {name} has shape {np.shape(arr)}, expected {shape}")
    time_ch = np.asarray(time_ch, dtype=np.float64).reshape(-1, *shape[1:])
    if time_ch.shape != shape:
        raise ValueError(f"time channel has shape {time_ch.shape}, expected {shape}")
    topo = np.asarray(topo, dtype=np.float64)
    if topo.shape == shape[1:]:
        topo = np.broadcast_to(topo, shape)
    if topo.shape != shape:
        raise ValueError(f"topography has shape {topo.shape}, expected {shape[1:]} or {shape}")
    out = np.empty((N_CHANNELS,) + shape)
    out[0] = xbar0
    out[1] = 1.0 - np.asarray(m, dtype=np.float64)
    out[2] = ir1
    out[3] = ir2
    out[4] = time_ch
    out[5] = topo
    out[6:10] = latlon_channels(grid)
    return out


def static_channels(grid: GridSpec, topo: np.ndarray) -> np.ndarray:
    """Topography plus the four lat/lon maps, as (5, L, H, W)."""
    topo = np.broadcast_to(np.asarray(topo, dtype=np.float64), grid.shape)
    return np.concatenate([topo[None], latlon_channels(grid)])


def augment(x0: np.ndarray, cond: np.ndarray, rng: np.random.Generator):
    """Random longitude flip, latitude flip and 180-degree rotation, each with p = 0.5.

    The same transform is applied to target and condition; the last two axes
    are (lat, lon).
    """
    flip_lon, flip_lat, rot = rng.random(3) < 0.5
    x, c = x0, cond
    if flip_lon:
        x, c = x[..., ::-1], c[..., ::-1]
    if flip_lat:
        x, c = x[..., ::-1, :], c[..., ::-1, :]
    if rot:
        x, c = x[..., ::-1, ::-1], c[..., ::-1, ::-1]
    return np.ascontiguousarray(x), np.ascontiguousarray(c)


def cond_dropout(cond: np.ndarray, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """With probability ``p_drop`` per sample, blank one random channel group to MISSING.

    Accepts (10, L, H, W) or a batch (B, 10, L, H, W); returns a copy.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    out = np.array(cond, dtype=np.float64, copy=True)
    batch = out if out.ndim == 5 else out[None]
    for b in range(batch.shape[0]):
        if rng.random() < p_drop:
            group = GROUP_NAMES[rng.integers(len(GROUP_NAMES))]
            batch[b, list(CHANNEL_GROUPS[group])] = MISSING
    return out


def drop_groups(cond: np.ndarray, groups: Sequence[str]) -> np.ndarray:
    """Force the named channel groups to MISSING (sensitivity ablation)."""
    out = np.array(cond, dtype=np.float64, copy=True)
    for g in groups:
        out[..., list(CHANNEL_GROUPS[g]), :, :, :] = MISSING
    return out


AUX_CHANNELS = CHANNEL_NAMES[2:]


def full_condition(xbar0: np.ndarray, m: np.ndarray, aux: np.ndarray) -> np.ndarray:
    """Prepend the masked field and the inpaint mask to the eight auxiliary channels.

    Works on single samples ``(L, H, W)`` + ``(8, L, H, W)`` or batches
    ``(B, L, H, W)`` + ``(B, 8, L, H, W)``; returns ``(..., 10, L, H, W)``.
    """
    xbar0 = np.asarray(xbar0, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    aux = np.asarray(aux, dtype=np.float64)
    if xbar0.shape != m.shape:
        raise ValueError(f"masked field {xbar0.shape} and mask {m.shape} differ in shape")
    ax = xbar0.ndim - 3
    expect = xbar0.shape[:ax] + (len(AUX_CHANNELS),) + xbar0.shape[ax:]
    if aux.shape != expect:
        raise ValueError(f"auxiliary condition has shape {aux.shape}, expected {expect}")
    head = np.stack([xbar0, 1.0 - m], axis=ax)
    return np.concatenate([head, aux], axis=ax)
