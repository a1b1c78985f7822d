"""``precipdiff`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
The only environment variable read is ``PRECIPDIFF_THREADS`` (BLAS/OpenMP
thread cap; set it to 1 for bitwise-reproducible runs).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import pipeline
from .condition import GROUP_NAMES
from .config import ConfigError, RunConfig, add_config_flags, load_config, overrides_from_args, save_config
from .diffusion import NonFiniteLoss
from .gridfile import DataError, atomic_write_text, read_arrays, read_grid, write_grid
from .metrics import parse_report, report_lines
from .render import render_frames
from .tensor import NonFiniteGradient

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "PRECIPDIFF_THREADS"

log = logging.getLogger("precipdiff")


def _config(args, checkpoint: Optional[str] = None) -> RunConfig:
    """Checkpoint settings (if any), then the config file, then flags."""
    base = {}
    if checkpoint:
        _, meta = read_arrays(checkpoint)
        base = dict(meta["config"])
    if args.config:
        base.update(_file_dict(args.config))
    base.update({k: v for k, v in overrides_from_args(args).items() if v is not None})
    return load_config(None, base)


def _file_dict(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return d


def _split_dir(data: str, split: str) -> Path:
    p = Path(data)
    return p / split if (p / split).is_dir() else p


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    for split in ("train", "eval"):
        corpus = pipeline.synth_corpus(cfg, split)
        pipeline.write_corpus(corpus, out / split, seed=cfg.data_seed if split == "train" else cfg.eval_seed)
        log.info("wrote %d %s sequences to %s", len(corpus), split, out / split)
    save_config(cfg, out / "config.json")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = pipeline.read_corpus(_split_dir(args.data, "train"), cfg.grid.shape)
    state = None
    if args.resume:
        state, _ = pipeline.load_checkpoint(args.resume, cfg)
        state.opt.lr = cfg.lr
    out = Path(args.out)
    save_config(cfg, out / "config.json")
    state = pipeline.train(cfg, corpus, out, state, on_epoch=lambda e, l: log.info("epoch %d/%d loss %.6f", e, cfg.epochs, l))
    print(f"trained {state.epoch} epochs; checkpoint {out / pipeline.CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _config(args, args.checkpoint)
    model, cfg = pipeline.load_model(args.checkpoint, cfg)
    corpus = pipeline.read_corpus(_split_dir(args.data, "eval"), cfg.grid.shape)
    members, mean = pipeline.sample_corpus(cfg, model, corpus)
    channels = [f"member_{k:02d}" for k in range(members.shape[1])] + ["mean"]
    for i, name in enumerate(corpus.names):
        stack = np.concatenate([members[i], mean[i][None]])
        write_grid(Path(args.out) / name, stack.astype(np.float32), channels, seed=cfg.sample_seed,
                   extra={"method": cfg.method, "sampler": cfg.sampler})
    print(f"sampled {len(corpus)} windows x {members.shape[1]} members into {args.out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    corpus = pipeline.read_corpus(_split_dir(args.data, "eval"))
    pred = pipeline.baseline_predict(args.method, corpus)
    for i, name in enumerate(corpus.names):
        write_grid(Path(args.out) / name, pred[i].astype(np.float32), ["mean"], extra={"method": args.method})
    print(f"{args.method} filled {len(corpus)} windows into {args.out}")
    return EXIT_OK


def _read_predictions(pred_dir: Path, names: Sequence[str]) -> np.ndarray:
    have = {p.stem for p in pred_dir.glob("*.hdr")}
    missing = [n for n in names if n not in have]
    extra = sorted(have - set(names))
    if missing or extra:
        raise DataError(f"prediction windows do not match data windows: missing {missing[:3]}, unexpected {extra[:3]}")
    out = []
    for n in names:
        g = read_grid(pred_dir / n)
        ch = g.channels.index("mean") if "mean" in g.channels else 0
        out.append(g.data[ch].astype(np.float64))
    return np.stack(out)


def cmd_evaluate(args) -> int:
    corpus = pipeline.read_corpus(_split_dir(args.data, "eval"))
    preds = _read_predictions(Path(args.pred), corpus.names)
    if preds.shape != corpus.fields.shape:
        raise DataError(f"prediction grid {preds.shape[1:]} differs from data grid {corpus.fields.shape[1:]}")
    report = pipeline.evaluate(preds, corpus)
    lines = report_lines(report)
    parse_report(lines)
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    for m, s in report.summary.items():
        print(f"{m:8s} mean {s['mean']:.6f}  95% CI [{s['ci_lo']:.6f}, {s['ci_hi']:.6f}]  n={s['n']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args, args.checkpoint)
    model, cfg = pipeline.load_model(args.checkpoint, cfg)
    corpus = pipeline.read_corpus(_split_dir(args.data, "eval"), cfg.grid.shape)
    table, raw = pipeline.ablate(cfg, model, corpus)
    atomic_write_text(args.out, pipeline.sensitivity_json(table, raw))
    for g in table.groups:
        print(f"{g:14s} delta {table.delta_mean[g]:+.5f}  r {table.r[g]:.3f}")
    return EXIT_OK


def cmd_render(args) -> int:
    g = read_grid(args.input)
    ch = args.channel or g.channels[0]
    if ch not in g.channels:
        raise DataError(f"{args.input} has no channel {ch!r}; channels are {g.channels}")
    paths = render_frames(g.data[g.channels.index(ch)], args.out, stem=f"{Path(args.input).stem}_{ch}")
    print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="precipdiff", description="Masked diffusion inpainting of gridded precipitation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, fn, help_, config=True):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        if config:
            p.add_argument("--config", help="JSON run config")
            add_config_flags(p)
        return p

    p = command("gen-data", cmd_gen_data, "write synthetic train/eval grid files")
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train a model; checkpoint and loss log every epoch")
    p.add_argument("--data", required=True, help="directory with grid files (or its train/ subdirectory)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = command("sample", cmd_sample, "K-member ensemble completions of evaluation windows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = command("baseline", cmd_baseline, "non-learned gap filling", config=False)
    p.add_argument("--method", required=True, choices=("tli", "tli-lf"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = command("evaluate", cmd_evaluate, "hole-domain metrics with bootstrap intervals", config=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="JSON Lines report")

    p = command("ablate", cmd_ablate, f"condition-group sensitivity over {', '.join(GROUP_NAMES)}")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="JSON sensitivity table")

    p = command("render", cmd_render, "one PNG per frame; missing values in gray", config=False)
    p.add_argument("--input", required=True, help="grid file (.hdr/.bin or stem)")
    p.add_argument("--channel", help="channel name (default: first)")
    p.add_argument("--out", required=True)
    return ap


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, NonFiniteGradient, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
