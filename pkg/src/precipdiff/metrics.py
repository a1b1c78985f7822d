"""Hole-domain metrics, bootstrap intervals, sensitivity contributions and report records.

``hole`` arrays are 1 where the model had to inpaint (the complement of the
observation mask). Fields are ``(L, H, W)``; frame 0 is the first frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.ndimage import binary_dilation

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
MS_SSIM_SCALES = 3
BOOTSTRAP_RESAMPLES = 10_000
BOOTSTRAP_SEED = 0

METRICS = ("rmse", "ms_ssim", "tg_rmse", "bdi", "pearson")
SENSITIVITY_METRICS = ("rmse", "ms_ssim", "tg_rmse", "bdi")
METRIC_SIGNS = {"rmse": 1.0, "ms_ssim": -1.0, "tg_rmse": 1.0, "bdi": 1.0}

REPORT_SCHEMA = "precipdiff.report/1"


def _prep(pred, truth, hole):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    hole = np.asarray(hole) == 1
    if not pred.shape == truth.shape == hole.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}, hole {hole.shape}")
    return pred, truth, hole


def rmse_hole(pred, truth, hole) -> float:
    pred, truth, hole = _prep(pred, truth, hole)
    if not hole.any():
        raise ValueError("hole domain is empty")
    return float(np.sqrt(np.mean((pred[hole] - truth[hole]) ** 2)))


def tg_rmse(pred, truth, hole) -> float:
    """RMSE of frame-to-frame differences over hole pixels from the second frame on."""
    pred, truth, hole = _prep(pred, truth, hole)
    sel = hole[1:]
    if not sel.any():
        raise ValueError("hole domain beyond the first frame is empty")
    err = np.diff(pred, axis=0) - np.diff(truth, axis=0)
    return float(np.sqrt(np.mean(err[sel] ** 2)))


def pearson_hole(pred, truth, hole) -> float:
    """Correlation over the hole; NaN when either side has zero variance there."""
    pred, truth, hole = _prep(pred, truth, hole)
    if not hole.any():
        raise ValueError("hole domain is empty")
    a = pred[hole] - pred[hole].mean()
    b = truth[hole] - truth[hole].mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        return float("nan")
    return float(a @ b) / den


def masked_ssim(x: np.ndarray, y: np.ndarray, m: np.ndarray, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """SSIM from population statistics of the pixels where ``m`` is true."""
    a, b = x[m], y[m]
    mu_a, mu_b = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = np.mean((a - mu_a) * (b - mu_b))
    return float(
        (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
    )


def _pool2(a: np.ndarray) -> np.ndarray:
    H, W = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
    a = a[:H, :W]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def ms_ssim_hole(pred, truth, hole, scales: int = MS_SSIM_SCALES, notes: Optional[list] = None) -> float:
    """Mean over frames of the mean masked SSIM across ``scales`` dyadic levels.

    The mask is average-pooled with the fields and re-binarized at 0.5.
    Scales (or frames) without hole pixels are skipped; a description of
    each skip is appended to ``notes`` if given.
    """
    pred, truth, hole = _prep(pred, truth, hole)
    if scales < 1:
        raise ValueError(f"scales must be >= 1, got {scales}")
    per_frame = []
    for f in range(pred.shape[0]):
        x, y, m = pred[f], truth[f], hole[f].astype(np.float64)
        vals = []
        for s in range(scales):
            if s > 0:
                if min(x.shape) < 2:
                    break
                x, y, m = _pool2(x), _pool2(y), (_pool2(m) >= 0.5).astype(np.float64)
            if not m.any():
                if notes is not None:
                    notes.append(f"frame {f} scale {s + 1}: hole vanished, skipped")
                continue
            vals.append(masked_ssim(x, y, m == 1))
        if vals:
            per_frame.append(np.mean(vals))
        elif notes is not None:
            notes.append(f"frame {f}: no hole pixels at any scale, skipped")
    if not per_frame:
        raise ValueError("hole domain is empty")
    return float(np.mean(per_frame))


def boundary_ring(hole2d: np.ndarray) -> np.ndarray:
    """One-pixel ring around a 2D hole: 3x3 dilation minus the hole."""
    h = np.asarray(hole2d) == 1
    return binary_dilation(h, structure=np.ones((3, 3), dtype=bool)) & ~h


def bdi(pred, truth, hole) -> float:
    """Mean absolute error on the first frame's hole boundary ring."""
    pred, truth, hole = _prep(pred, truth, hole)
    if not hole[0].any():
        raise ValueError("first-frame hole is empty")
    ring = boundary_ring(hole[0])
    if not ring.any():
        raise ValueError("first-frame hole has no boundary (it covers the frame)")
    return float(np.mean(np.abs(pred[0][ring] - truth[0][ring])))


METRIC_FUNCS = {"rmse": rmse_hole, "ms_ssim": ms_ssim_hole, "tg_rmse": tg_rmse, "bdi": bdi, "pearson": pearson_hole}


def all_metrics(pred, truth, hole) -> dict[str, float]:
    return {name: METRIC_FUNCS[name](pred, truth, hole) for name in METRICS}


def bootstrap_ci(
    samples: Sequence[float], level: float = 0.95, n_resamples: int = BOOTSTRAP_RESAMPLES, seed: int = BOOTSTRAP_SEED
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise ValueError(f"bootstrap needs at least 2 samples, got {x.size}")
    if np.all(x == x[0]):
        return float(x[0]), float(x[0])
    res = stats.bootstrap(
        (x,), np.mean, confidence_level=level, n_resamples=n_resamples, method="percentile",
        random_state=np.random.default_rng(seed),
    )
    lo, hi = res.confidence_interval
    return float(lo), float(hi)


@dataclass
class SensitivityTable:
    groups: list[str]
    metrics: tuple[str, ...]
    delta: dict[str, dict[str, float]]
    delta_mean: dict[str, float]
    r: dict[str, float]
    signs: dict[str, float] = field(default_factory=lambda: dict(METRIC_SIGNS))
    defined: bool = True


def sensitivity(
    full_means: Mapping[str, float],
    ablated_means: Mapping[str, Mapping[str, float]],
    metrics: Sequence[str] = SENSITIVITY_METRICS,
) -> SensitivityTable:
    """Signed degradation per metric, its mean per group, and normalised contributions.

    When the degradations sum to zero the contributions are NaN and
    ``defined`` is False.
    """
    metrics = tuple(metrics)
    for g, means in ablated_means.items():
        missing = [m for m in metrics if m not in means or m not in full_means]
        if missing:
            raise ValueError(f"group {g!r} lacks metrics {missing}")
    delta = {
        g: {m: METRIC_SIGNS[m] * (means[m] - full_means[m]) for m in metrics} for g, means in ablated_means.items()
    }
    delta_mean = {g: float(np.mean([d[m] for m in metrics])) for g, d in delta.items()}
    total = sum(delta_mean.values())
    defined = total != 0.0
    r = {g: (v / total if defined else float("nan")) for g, v in delta_mean.items()}
    return SensitivityTable(list(ablated_means), metrics, delta, delta_mean, r, defined=defined)


@dataclass
class MetricReport:
    windows: list[dict]
    summary: dict[str, dict[str, float]]
    notes: list[str] = field(default_factory=list)


def build_report(per_window: Sequence[Mapping[str, float]], notes: Iterable[str] = (), **ci_kwargs) -> MetricReport:
    """Per-window values plus mean and bootstrap interval for every metric.

    Non-finite window values (e.g. an undefined correlation) are left out of
    the summary for that metric.
    """
    windows = [dict(w) for w in per_window]
    summary = {}
    for name in METRICS:
        vals = np.array([w[name] for w in windows if name in w], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            summary[name] = {"mean": float("nan"), "ci_lo": float("nan"), "ci_hi": float("nan"), "n": 0}
            continue
        mean = float(vals.mean())
        lo, hi = bootstrap_ci(vals, **ci_kwargs) if vals.size >= 2 else (mean, mean)
        summary[name] = {"mean": mean, "ci_lo": lo, "ci_hi": hi, "n": int(vals.size)}
    return MetricReport(windows, summary, list(notes))


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _restore(v):
    return float("nan") if v is None else v


def report_lines(report: MetricReport) -> list[str]:
    """JSON Lines: one ``window`` record each, then one ``summary`` record."""
    lines = []
    for i, w in enumerate(report.windows):
        rec = {"schema": REPORT_SCHEMA, "record": "window", "index": i}
        rec.update({k: _clean(v) for k, v in w.items()})
        lines.append(json.dumps(rec, sort_keys=True))
    summ = {k: {kk: _clean(vv) for kk, vv in v.items()} for k, v in report.summary.items()}
    lines.append(
        json.dumps(
            {"schema": REPORT_SCHEMA, "record": "summary", "n_windows": len(report.windows), "metrics": summ,
             "notes": report.notes},
            sort_keys=True,
        )
    )
    return lines


def parse_report(lines: Iterable[str]) -> MetricReport:
    windows, summary, notes = [], None, []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        if rec.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {rec.get('schema')!r}")
        kind = rec.pop("record")
        rec.pop("schema")
        if kind == "window":
            rec.pop("index")
            windows.append({k: _restore(v) for k, v in rec.items()})
        elif kind == "summary":
            summary = {k: {kk: _restore(vv) for kk, vv in v.items()} for k, v in rec["metrics"].items()}
            notes = rec.get("notes", [])
            if rec["n_windows"] != len(windows):
                raise ValueError("summary window count does not match window records")
        else:
            raise ValueError(f"unknown record type {kind!r}")
    if summary is None:
        raise ValueError("report has no summary record")
    return MetricReport(windows, summary, notes)
