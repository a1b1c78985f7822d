"""Training, ensemble sampling, evaluation and ablation built from a RunConfig."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .baselines import METHODS as BASELINES
from .condition import AUX_CHANNELS, GROUP_NAMES, augment, mask_apply
from .config import ConfigError, RunConfig
from .diffusion import (
    lat_weight,
    masked_sample,
    rf_sample,
    rf_train_step,
    supervised_predict,
    supervised_train_step,
    train_step,
)
from .gridfile import DataError, atomic_write_text, read_arrays, read_grid, write_arrays, write_grid
from .metrics import METRICS, SENSITIVITY_METRICS, MetricReport, SensitivityTable, all_metrics, build_report, sensitivity
from .synthgen import SynthDataset, make_dataset
from .tensor import AdamState, EmaState
from .unet import UNet3D

log = logging.getLogger(__name__)

DATA_CHANNELS = ("precip", "obs_mask") + tuple(AUX_CHANNELS)
CHECKPOINT_NAME = "checkpoint.ckpt"
LOSS_LOG_NAME = "loss.log"


# data


@dataclass
class Corpus:
    """Aligned arrays: fields/masks ``(n, L, H, W)``, aux ``(n, 8, L, H, W)``."""

    fields: np.ndarray
    masks: np.ndarray
    aux: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = self.fields.shape[0]
        if self.masks.shape != self.fields.shape or self.aux.shape[0] != n or self.aux.shape[2:] != self.fields.shape[1:]:
            raise DataError(
                f"corpus arrays disagree: fields {self.fields.shape}, masks {self.masks.shape}, aux {self.aux.shape}"
            )
        if not self.names:
            self.names = [f"seq_{i:04d}" for i in range(n)]

    def __len__(self) -> int:
        return self.fields.shape[0]

    @classmethod
    def from_synth(cls, ds: SynthDataset) -> "Corpus":
        return cls(ds.fields, ds.masks, ds.aux)

    @property
    def xbar0(self) -> np.ndarray:
        return mask_apply(self.fields, self.masks)


def synth_corpus(cfg: RunConfig, split: str) -> Corpus:
    n = cfg.n_train if split == "train" else cfg.n_eval
    ds = make_dataset(cfg.synth_config(split), n, cfg.exp_transform(), cfg.ir_transform(), cfg.topo_transform())
    return Corpus.from_synth(ds)


def write_corpus(corpus: Corpus, directory, seed: Optional[int] = None) -> None:
    directory = Path(directory)
    for i, name in enumerate(corpus.names):
        stack = np.concatenate([corpus.fields[i][None], corpus.masks[i][None], corpus.aux[i]])
        write_grid(directory / name, stack.astype(np.float32), DATA_CHANNELS, seed=seed)


def read_corpus(directory, grid: Optional[tuple[int, int, int]] = None) -> Corpus:
    directory = Path(directory)
    headers = sorted(directory.glob("*.hdr"))
    if not headers:
        raise DataError(f"no grid files in {directory}")
    fields_, masks, aux, names = [], [], [], []
    for h in headers:
        g = read_grid(h)
        if tuple(g.channels) != DATA_CHANNELS:
            raise DataError(f"{h}: expected channels {DATA_CHANNELS}, got {tuple(g.channels)}")
        if grid is not None and g.dims[1:] != tuple(grid):
            raise DataError(f"{h}: grid {g.dims[1:]} does not match config {tuple(grid)}")
        d = g.data.astype(np.float64)
        fields_.append(d[0])
        masks.append(d[1])
        aux.append(d[2:])
        names.append(h.stem)
    shapes = {f.shape for f in fields_}
    if len(shapes) != 1:
        raise DataError(f"grid files in {directory} have different shapes: {sorted(shapes)}")
    return Corpus(np.stack(fields_), np.stack(masks), np.stack(aux), names)


# training state


@dataclass
class TrainState:
    model: UNet3D
    opt: AdamState
    ema: EmaState
    rng: np.random.Generator
    epoch: int = 0
    losses: list[float] = field(default_factory=list)

    def ema_model(self) -> UNet3D:
        names = list(self.model.params)
        return UNet3D(self.model.config, params=dict(zip(names, self.ema.shadow)))


def init_state(cfg: RunConfig) -> TrainState:
    model = UNet3D(cfg.unet_config(), seed=cfg.seed)
    params = model.parameters()
    opt = AdamState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    ema = EmaState.for_params(params, decay=cfg.ema_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    return TrainState(model, opt, ema, rng)


def save_checkpoint(path, state: TrainState, cfg: RunConfig) -> None:
    arrays = {}
    for i, (name, p) in enumerate(state.model.named_parameters()):
        arrays[f"param/{name}"] = p.data
        arrays[f"ema/{name}"] = state.ema.shadow[i]
        arrays[f"adam_m/{name}"] = state.opt.m[i]
        arrays[f"adam_v/{name}"] = state.opt.v[i]
    meta = {
        "config": cfg.to_dict(),
        "epoch": state.epoch,
        "step": state.opt.step,
        "losses": state.losses,
        "rng": state.rng.bit_generator.state,
    }
    write_arrays(path, arrays, meta)


def load_checkpoint(path, cfg: Optional[RunConfig] = None) -> tuple[TrainState, RunConfig]:
    """Restore a training state; ``cfg`` (if given) must agree on the model/grid settings."""
    arrays, meta = read_arrays(path)
    saved = RunConfig.from_dict(meta["config"])
    if cfg is not None:
        keys = ("L", "H", "W", "base_channels", "method", "T", "schedule", "beta_min", "beta_max", "cosine_s")
        diff = [k for k in keys if getattr(cfg, k) != getattr(saved, k)]
        if diff:
            raise ConfigError(f"checkpoint {path} was made with different settings: {diff}")
    else:
        cfg = saved
    state = init_state(cfg)
    names = list(state.model.params)
    try:
        state.model.load_params({n: arrays[f"param/{n}"] for n in names})
        state.ema.shadow = [arrays[f"ema/{n}"].copy() for n in names]
        state.opt.m = [arrays[f"adam_m/{n}"].copy() for n in names]
        state.opt.v = [arrays[f"adam_v/{n}"].copy() for n in names]
    except KeyError as e:
        raise DataError(f"checkpoint {path} lacks parameter {e}") from e
    state.opt.step = int(meta["step"])
    state.epoch = int(meta["epoch"])
    state.losses = [float(v) for v in meta["losses"]]
    state.rng.bit_generator.state = meta["rng"]
    return state, cfg


def load_model(path, cfg: Optional[RunConfig] = None, use_ema: bool = True) -> tuple[UNet3D, RunConfig]:
    state, cfg = load_checkpoint(path, cfg)
    return (state.ema_model() if use_ema else state.model), cfg


# training


def _augment_batch(x0, mask, aux, rng):
    xs, ms, cs = [], [], []
    for b in range(x0.shape[0]):
        x, c = augment(x0[b], np.concatenate([mask[b][None], aux[b]]), rng)
        xs.append(x)
        ms.append(c[0])
        cs.append(c[1:])
    return np.stack(xs), np.stack(ms), np.stack(cs)


def train_epoch(state: TrainState, corpus: Corpus, cfg: RunConfig) -> float:
    """One pass over the corpus; masks are drawn from the corpus pool independently of fields."""
    rng = state.rng
    sched = cfg.noise_schedule() if cfg.method == "ddpm" else None
    lat_w = lat_weight(cfg.grid, cfg.lat_eps)
    n = len(corpus)
    order = rng.permutation(n)
    losses, sizes = [], []
    for start in range(0, n, cfg.batch):
        idx = order[start : start + cfg.batch]
        x0, aux = corpus.fields[idx], corpus.aux[idx]
        mask = corpus.masks[rng.integers(0, n, size=idx.size)]
        if cfg.augment:
            x0, mask, aux = _augment_batch(x0, mask, aux, rng)
        if cfg.method == "ddpm":
            loss = train_step(x0, mask, aux, state.model, sched, state.opt, state.ema, lat_w, rng)
        elif cfg.method == "rf":
            loss = rf_train_step(x0, mask, aux, state.model, state.opt, state.ema, lat_w, rng)
        else:
            loss = supervised_train_step(x0, mask, aux, state.model, state.opt, state.ema, lat_w, rng)
        losses.append(loss)
        sizes.append(idx.size)
    return float(np.average(losses, weights=sizes))


def train(
    cfg: RunConfig,
    corpus: Corpus,
    out_dir=None,
    state: Optional[TrainState] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainState:
    """Run epochs ``state.epoch + 1 .. cfg.epochs``; checkpoint and loss log after each one."""
    if corpus.fields.shape[1:] != cfg.grid.shape:
        raise DataError(f"corpus grid {corpus.fields.shape[1:]} does not match config {cfg.grid.shape}")
    if np.any(corpus.fields < 0) or np.any(corpus.fields > 1):
        raise DataError("training fields must lie in [0, 1]")
    state = state or init_state(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None and state.epoch == 0:
        save_checkpoint(out / CHECKPOINT_NAME, state, cfg)
        atomic_write_text(out / LOSS_LOG_NAME, "")
    while state.epoch < cfg.epochs:
        loss = train_epoch(state, corpus, cfg)
        state.epoch += 1
        state.losses.append(loss)
        log.info("epoch %d loss %.6f", state.epoch, loss)
        if out is not None:
            save_checkpoint(out / CHECKPOINT_NAME, state, cfg)
            atomic_write_text(
                out / LOSS_LOG_NAME, "".join(f"{i + 1} {v!r}\n" for i, v in enumerate(state.losses))
            )
        if on_epoch is not None:
            on_epoch(state.epoch, loss)
    return state


def read_loss_log(path) -> list[float]:
    return [float(line.split()[1]) for line in Path(path).read_text().splitlines() if line.strip()]


# sampling


class MemberStreams:
    """Batched normal draws where row ``k`` comes from its own seeded generator.

    Lets K ensemble members run as one batch while each member stays a pure
    function of its own seed.
    """

    def __init__(self, seeds: Sequence):
        self.gens = [np.random.default_rng(s) for s in seeds]

    def standard_normal(self, shape):
        if shape[0] != len(self.gens):
            raise ValueError(f"batch of {shape[0]} for {len(self.gens)} member streams")
        return np.stack([g.standard_normal(shape[1:]) for g in self.gens])


def member_seeds(base_seed: int, window: int, K: int) -> list[tuple[int, int, int]]:
    return [(base_seed, window, k) for k in range(K)]


def sample_members(
    cfg: RunConfig, model, xbar0, mask, aux, K: int, seeds: Sequence, drop: Sequence[str] = ()
) -> np.ndarray:
    """K completions of one window, ``(K, L, H, W)``."""
    if len(seeds) != K:
        raise ValueError(f"need {K} seeds, got {len(seeds)}")
    xb = np.repeat(np.asarray(xbar0, dtype=np.float64)[None], K, axis=0)
    mk = np.repeat(np.asarray(mask, dtype=np.float64)[None], K, axis=0)
    ax = np.repeat(np.asarray(aux, dtype=np.float64)[None], K, axis=0)
    streams = MemberStreams(seeds)
    if cfg.method == "ddpm":
        return masked_sample(xb, mk, ax, model, cfg.noise_schedule(), streams, sampler=cfg.sampler,
                             n_steps=cfg.sampler_steps, drop=drop)
    if cfg.method == "rf":
        return rf_sample(xb, mk, ax, model, cfg.sampler_steps, streams, drop=drop)
    return supervised_predict(xb, mk, ax, model, drop=drop)


def sample_corpus(cfg: RunConfig, model, corpus: Corpus, K: Optional[int] = None, drop: Sequence[str] = ()):
    """Members ``(n, K, L, H, W)`` and ensemble means ``(n, L, H, W)``."""
    K = K or cfg.K
    xbar0 = corpus.xbar0
    members = np.stack([
        sample_members(cfg, model, xbar0[i], corpus.masks[i], corpus.aux[i], K, member_seeds(cfg.sample_seed, i, K), drop)
        for i in range(len(corpus))
    ])
    # (a + a + a) / 3 need not round back to a; observed pixels are copied exactly
    mean = np.where(corpus.masks == 1, xbar0, members.mean(axis=1))
    return members, mean


def baseline_predict(method: str, corpus: Corpus) -> np.ndarray:
    if method not in BASELINES:
        raise ConfigError(f"unknown baseline {method!r}; choose from {sorted(BASELINES)}")
    return BASELINES[method](corpus.xbar0)


# evaluation


def window_metrics(preds, corpus: Corpus) -> list[dict]:
    preds = np.asarray(preds, dtype=np.float64)
    if preds.shape != corpus.fields.shape:
        raise DataError(f"predictions {preds.shape} are not aligned with windows {corpus.fields.shape}")
    out = []
    for i in range(len(corpus)):
        rec = {"window": corpus.names[i]}
        rec.update(all_metrics(preds[i], corpus.fields[i], 1.0 - corpus.masks[i]))
        out.append(rec)
    return out


def evaluate(preds, corpus: Corpus, **ci_kwargs) -> MetricReport:
    return build_report(window_metrics(preds, corpus), **ci_kwargs)


def ablate(cfg: RunConfig, model, corpus: Corpus, K: Optional[int] = None,
           groups: Sequence[str] = GROUP_NAMES) -> tuple[SensitivityTable, dict]:
    """Force each condition group to -1 in turn and compare mean metrics with the full run.

    All runs reuse the same member seeds, so differences come from the
    conditions rather than sampling noise.
    """
    def means(drop):
        _, mean = sample_corpus(cfg, model, corpus, K, drop)
        rows = window_metrics(mean, corpus)
        return {m: float(np.nanmean([r[m] for r in rows])) for m in METRICS}

    full = means(())
    ablated = {g: means((g,)) for g in groups}
    return sensitivity(full, ablated, SENSITIVITY_METRICS), {"full": full, "ablated": ablated}


def sensitivity_json(table: SensitivityTable, raw: dict) -> str:
    doc = {
        "groups": table.groups,
        "metrics": list(table.metrics),
        "signs": table.signs,
        "delta": table.delta,
        "delta_mean": table.delta_mean,
        "r": {g: (v if np.isfinite(v) else None) for g, v in table.r.items()},
        "defined": table.defined,
        "means": raw,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
