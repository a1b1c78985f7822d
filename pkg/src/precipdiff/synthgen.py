"""Procedural ground truth: advected Gaussian rain blobs, swath masks and auxiliary inputs.

Everything is a pure function of the config and its seed, so a corpus can be
regenerated bit for bit instead of shipped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .condition import (
    IR_TRANSFORM,
    TOPO_TRANSFORM,
    ExpTransform,
    GridSpec,
    LogisticTransform,
    TimeEmbedSpec,
    exp_forward,
    ir_coverage_rows,
    logistic_forward,
    static_channels,
    time_embedding,
)

FRAME_SECONDS = 3600.0
SECONDS_PER_YEAR = 365.0 * 86400.0


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    Attributes:
        L, H, W: frames, rows (latitude), columns (longitude).
        n_blobs: rain cells per sequence.
        velocity: rigid advection ``(rows, cols)`` per frame; columns wrap.
        blob_scale: typical Gaussian standard deviation in cells.
        amplitude: ``(lo, hi)`` peak intensity range, precipitation units.
        threshold: intensity subtracted before clipping at 0 (creates dry areas).
        swath_width: band width in columns, at least 1.
        swath_count: number of evenly spaced bands (their union is observed).
        swath_shift: band displacement in columns per frame.
        swath_wiggle: amplitude in columns of the band's sinusoidal meander.
        seed: master seed.
    """

    L: int = 3
    H: int = 16
    W: int = 32
    n_blobs: int = 3
    velocity: tuple[float, float] = (0.0, 1.5)
    blob_scale: float = 2.5
    amplitude: tuple[float, float] = (1.0, 5.0)
    threshold: float = 0.3
    swath_width: float = 8.0
    swath_count: int = 2
    swath_shift: float = 5.0
    swath_wiggle: float = 3.0
    seed: int = 0

    def __post_init__(self):
        GridSpec(self.L, self.H, self.W)
        if self.H % 8 or self.W % 8:
            raise ValueError(f"H and W must be divisible by 8, got {self.H}x{self.W}")
        if self.n_blobs < 0:
            raise ValueError("n_blobs must be >= 0")
        if self.blob_scale <= 0:
            raise ValueError("blob_scale must be positive")
        if not 0 <= self.amplitude[0] <= self.amplitude[1]:
            raise ValueError(f"amplitude range must satisfy 0 <= lo <= hi, got {self.amplitude}")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.swath_width < 1:
            raise ValueError(f"swath_width must be >= 1, got {self.swath_width}")
        if self.swath_count < 1:
            raise ValueError("swath_count must be >= 1")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.L, self.H, self.W)

    def to_dict(self) -> dict:
        return asdict(self)


def _wrap(d: np.ndarray, period: float) -> np.ndarray:
    """Signed periodic offset in [-period/2, period/2)."""
    return (d + period / 2) % period - period / 2


def _draw_blobs(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Rows of (cy, cx, sigma_major, sigma_minor, angle, amplitude)."""
    n = cfg.n_blobs
    cy = rng.uniform(0, cfg.H - 1, n)
    cx = rng.uniform(0, cfg.W, n)
    major = cfg.blob_scale * rng.uniform(0.8, 1.6, n)
    minor = major * rng.uniform(0.35, 0.8, n)
    angle = rng.uniform(0, np.pi, n)
    amp = rng.uniform(*cfg.amplitude, n)
    return np.stack([cy, cx, major, minor, angle, amp], axis=1)


def blob_intensity(cfg: SynthConfig, blobs: np.ndarray, frame: float) -> np.ndarray:
    """Raw (untransformed, unthresholded) intensity of one frame, shape (H, W)."""
    rows = np.arange(cfg.H, dtype=np.float64)[:, None]
    cols = np.arange(cfg.W, dtype=np.float64)[None, :]
    out = np.zeros((cfg.H, cfg.W))
    vy, vx = cfg.velocity
    for cy, cx, a, b, ang, amp in blobs:
        dy = rows - (cy + vy * frame)
        dx = _wrap(cols - (cx + vx * frame), cfg.W)
        c, s = np.cos(ang), np.sin(ang)
        u = c * dx + s * dy
        w = -s * dx + c * dy
        out += amp * np.exp(-0.5 * ((u / a) ** 2 + (w / b) ** 2))
    return out


def _raw_sequence(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    blobs = _draw_blobs(cfg, rng)
    return np.stack([blob_intensity(cfg, blobs, f) for f in range(cfg.L)])


def _sequence_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def precip_from_raw(raw: np.ndarray, cfg: SynthConfig, tf: ExpTransform = ExpTransform()) -> np.ndarray:
    return exp_forward(np.maximum(raw - cfg.threshold, 0.0), tf)


def gen_fields(cfg: SynthConfig, n_sequences: int, tf: ExpTransform = ExpTransform()) -> np.ndarray:
    """Complete transformed fields, shape ``(n, L, H, W)``, values in [0, 1)."""
    rngs = _sequence_rngs(cfg.seed, n_sequences)
    return np.stack([precip_from_raw(_raw_sequence(cfg, r), cfg, tf) for r in rngs]) if rngs else np.zeros(
        (0, cfg.L, cfg.H, cfg.W)
    )


def swath_centres(cfg: SynthConfig, frame: float) -> np.ndarray:
    """Band centre column per row for every band, shape (swath_count, H)."""
    rows = np.arange(cfg.H)
    meander = cfg.swath_wiggle * np.sin(2 * np.pi * rows / cfg.H)
    base = np.arange(cfg.swath_count) * cfg.W / cfg.swath_count + cfg.swath_shift * frame
    return base[:, None] + meander[None, :]


def gen_swath_mask(cfg: SynthConfig, frame: float) -> np.ndarray:
    """Observation mask of one frame, (H, W): 1 inside any band, else 0."""
    if cfg.swath_width >= cfg.W:
        return np.ones((cfg.H, cfg.W))
    cols = np.arange(cfg.W, dtype=np.float64)
    obs = np.zeros((cfg.H, cfg.W), dtype=bool)
    for centre in swath_centres(cfg, frame):
        obs |= np.abs(_wrap(cols[None, :] - centre[:, None], cfg.W)) < cfg.swath_width / 2
    return obs.astype(np.float64)


def swath_fraction(cfg: SynthConfig) -> float:
    """Analytic observed fraction: equal-width evenly spaced bands overlap only once they tile the circle."""
    return min(1.0, cfg.swath_count * cfg.swath_width / cfg.W)


def gen_mask_volume(cfg: SynthConfig, start_frame: float = 0.0) -> np.ndarray:
    return np.stack([gen_swath_mask(cfg, start_frame + f) for f in range(cfg.L)])


def topography(cfg: SynthConfig, seed: int = 12345) -> np.ndarray:
    """Fixed smooth elevation surface in metres, (H, W); oceans sit at 0."""
    r = np.random.default_rng(seed)
    z = gaussian_filter(r.standard_normal((cfg.H, cfg.W)), sigma=(cfg.H / 8, cfg.W / 8), mode=("nearest", "wrap"))
    z = (z - z.mean()) / (z.std() + 1e-12)
    return np.maximum(z, 0.0) * 1500.0


def ir_bands(
    raw: np.ndarray, grid: GridSpec, tf: LogisticTransform = IR_TRANSFORM
) -> tuple[np.ndarray, np.ndarray]:
    """Two transformed cloud-proxy bands from a raw intensity sequence, each (L, H, W).

    Brightness temperatures fall as the smoothed intensity rises; rows outside
    the IR coverage belt are MISSING.
    """
    smooth1 = gaussian_filter(raw, sigma=(0, 1.0, 1.0), mode=("nearest", "nearest", "wrap"))
    smooth2 = gaussian_filter(raw, sigma=(0, 2.0, 2.0), mode=("nearest", "nearest", "wrap"))
    tb1 = 285.0 - 20.0 * smooth1
    tb2 = 280.0 - 25.0 * smooth2
    valid = np.broadcast_to(ir_coverage_rows(grid)[None, :, None], raw.shape)
    return logistic_forward(tb1, tf, valid), logistic_forward(tb2, tf, valid)


@dataclass
class SynthDataset:
    """A corpus of complete fields with masks and auxiliary condition channels.

    Attributes:
        fields: ``(n, L, H, W)`` transformed ground truth.
        masks: ``(n, L, H, W)`` observation masks, 1 = observed.
        aux: ``(n, 8, L, H, W)`` channels ir1, ir2, time, topo, lat/lon maps.
        times: ``(n, L)`` frame times in seconds.
    """

    fields: np.ndarray
    masks: np.ndarray
    aux: np.ndarray
    times: np.ndarray
    config: SynthConfig = field(default_factory=SynthConfig)

    def __len__(self) -> int:
        return self.fields.shape[0]


def make_dataset(
    cfg: SynthConfig,
    n_sequences: int,
    tf: ExpTransform = ExpTransform(),
    ir_tf: LogisticTransform = IR_TRANSFORM,
    topo_tf: LogisticTransform = TOPO_TRANSFORM,
) -> SynthDataset:
    """Fields plus swath masks (random orbit phase per sequence) and auxiliary channels."""
    grid = cfg.grid
    rngs = _sequence_rngs(cfg.seed, n_sequences)
    meta = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(n_sequences + 1)[-1])
    static = static_channels(grid, logistic_forward(topography(cfg), topo_tf))
    spec = TimeEmbedSpec()
    fields, masks, aux, times = [], [], [], []
    for r in rngs:
        raw = _raw_sequence(cfg, r)
        fields.append(precip_from_raw(raw, cfg, tf))
        masks.append(gen_mask_volume(cfg, start_frame=float(meta.integers(0, 10_000))))
        tau = meta.uniform(0, SECONDS_PER_YEAR) + FRAME_SECONDS * np.arange(cfg.L)
        times.append(tau)
        ir1, ir2 = ir_bands(raw, grid, ir_tf)
        aux.append(np.concatenate([ir1[None], ir2[None], time_embedding(tau, spec, grid), static]))
    shape = (0, cfg.L, cfg.H, cfg.W)
    if not fields:
        return SynthDataset(np.zeros(shape), np.zeros(shape), np.zeros((0, 8) + shape[1:]), np.zeros((0, cfg.L)), cfg)
    return SynthDataset(np.stack(fields), np.stack(masks), np.stack(aux), np.stack(times), cfg)
