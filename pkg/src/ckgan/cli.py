"""Command-line entry point: ``ckgan train|eval|sample|sweep|data export``."""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import data as datasets
from . import metrics as M
from . import store
from .trainer import TrainConfig, TrainingDiverged, evaluate_state, init_state, run, sample_generator, stream

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _config_with_seed(path: str, seed: int | None) -> tuple[TrainConfig, dict[str, Any]]:
    cfg, extras = store.load_config(path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg, extras


def _out_dir(arg: str | None, extras: dict[str, Any]) -> Path:
    out = store.resolve_out(arg if arg is not None else extras["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {str(out)!r}: {exc.strerror}") from None
    return out


def train_run(cfg: TrainConfig, out: Path, checkpoint_every: int | None = None,
              resume: str | None = None, log=None):
    """Train into ``out``: config.json, metrics.csv, checkpoints/, final.ckpt, samples.csv."""
    state = store.load_checkpoint(resume, cfg) if resume else init_state(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(store.config_to_dict(cfg, {"checkpoint_every": checkpoint_every}), indent=2) + "\n")
    writer = store.MetricsWriter(out / "metrics.csv", append=bool(resume))
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    every = checkpoint_every or cfg.eval_every
    last = None
    for report in run(state):
        writer.write(report)
        last = report
        if log:
            log(f"iter {report.iteration}: modes={report.modes_captured} hq={report.hq_percent:.2f} "
                f"kl={report.kl:.4f}")
        if report.iteration and report.iteration % every == 0:
            store.save_checkpoint(ckpt_dir / f"iter_{report.iteration:07d}.ckpt", state)
    store.save_checkpoint(out / "final.ckpt", state)
    samples = sample_generator(state, cfg.eval_samples, stream(cfg.seed, "eval", state.iteration))
    store.write_points(out / "samples.csv", samples)
    if last is None:
        last = evaluate_state(state)
    return state, last


def cmd_train(args) -> int:
    cfg, extras = _config_with_seed(args.config, args.seed)
    out = _out_dir(args.out, extras)
    try:
        train_run(cfg, out, extras["checkpoint_every"], args.checkpoint, log=_stderr)
    except TrainingDiverged as exc:
        _stderr(f"training diverged: {exc}")
        return EXIT_DIVERGED
    return EXIT_OK


def _eval_rng(seed: int | None, state) -> np.random.Generator:
    if seed is None:
        return stream(state.config.seed, "eval", state.iteration)
    return np.random.default_rng(seed)


def cmd_eval(args) -> int:
    if args.n is not None and args.n < 1:
        raise UsageError("--n must be at least 1")
    cfg_override = store.load_config(args.config)[0] if args.config else None
    if args.real:
        base = cfg_override or TrainConfig()
        kind = args.dataset or base.dataset
        base = dataclasses.replace(base, dataset=kind)
        n = args.n or base.eval_samples
        seed = base.seed if args.seed is None else args.seed
        reference = datasets.sample(kind, base.n_train, stream(base.seed, "data"), base.smile())
        pts = datasets.sample(kind, n, np.random.default_rng(seed), base.smile())
        iteration = 0
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --real)")
        state = store.load_checkpoint(args.checkpoint, cfg_override)
        if args.dataset:
            state.config = dataclasses.replace(state.config, dataset=args.dataset)
        base = state.config
        n = args.n or base.eval_samples
        pts = sample_generator(state, n, _eval_rng(args.seed, state))
        reference = datasets.sample(base.dataset, base.n_train, stream(base.seed, "data"), base.smile())
        iteration = state.iteration
    spec = base.mixture()
    modes, hq, kl = M.evaluate_samples(pts, spec, reference)
    fd = M.frechet_2d(pts, reference)
    header = ["iter", "dataset", "n", "modes", "max_modes", "hq", "kl", "frechet"]
    row = [iteration, base.dataset, n, modes, spec.n_modes, hq, kl, fd]
    print(",".join(header))
    print(",".join(store.fmt(v) for v in row))
    if args.out:
        out = store.resolve_out(args.out)
        _writable(out)
        store.write_csv(out, header, [row])
    return EXIT_OK


def _writable(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "ab"):
            pass
    except OSError as exc:
        raise UsageError(f"cannot write {str(path)!r}: {exc.strerror}") from None


def cmd_sample(args) -> int:
    if args.n is None or args.n < 1:
        raise UsageError("--n must be at least 1")
    state = store.load_checkpoint(args.checkpoint)
    out = store.resolve_out(args.out)
    _writable(out)
    store.write_points(out, sample_generator(state, args.n, _eval_rng(args.seed, state)))
    return EXIT_OK


def cmd_data_export(args) -> int:
    cfg = store.load_config(args.config)[0] if args.config else TrainConfig()
    kind = args.dataset or cfg.dataset
    n = args.n or cfg.n_train
    seed = cfg.seed if args.seed is None else args.seed
    out = store.resolve_out(args.out)
    _writable(out)
    store.write_points(out, datasets.sample(kind, n, np.random.default_rng(seed), cfg.smile()))
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep


SWEEP_METRICS = ["iter", "modes", "hq", "kl", "loss_d", "loss_g",
                 "xi_1", "xi_2", "xi_3", "xi_4", "xi_5", "xi_6", "seconds"]


def _sweep_cell(base: dict[str, Any], overrides: dict[str, Any], out: str) -> tuple[list, str]:
    doc = dict(base)
    doc.update(overrides)
    try:
        cfg, extras = store.config_from_dict(doc)
        _, report = train_run(cfg, Path(out), extras["checkpoint_every"])
        return report.row(), "ok"
    except (store.ConfigError, TrainingDiverged, ValueError) as exc:
        return [np.nan] * len(SWEEP_METRICS), f"error: {exc}".replace(",", ";").replace("\n", " ")


def sweep(base: dict[str, Any], grid: dict[str, list], out: Path, seeds: int = 1, jobs: int = 1) -> list[list]:
    """Train and evaluate every grid cell (times ``seeds`` consecutive seeds)."""
    keys = list(grid)
    cells = list(itertools.product(*(grid[k] for k in keys))) if keys else [()]
    seed0 = int(base.get("seed", 0))
    tasks = []
    for ci, values in enumerate(cells):
        for s in range(seeds):
            overrides = dict(zip(keys, values))
            if seeds > 1:
                overrides["seed"] = seed0 + s
            tasks.append((ci, values, overrides, str(out / f"cell{ci:03d}_seed{seed0 + s}")))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_cell, [base] * len(tasks), [t[2] for t in tasks],
                                    [t[3] for t in tasks]))
    else:
        results = [_sweep_cell(base, t[2], t[3]) for t in tasks]
    rows = []
    for ci, values in enumerate(cells):
        mine = [(t, r) for t, r in zip(tasks, results) if t[0] == ci]
        for t, (metrics, status) in mine:
            rows.append([*values, t[2].get("seed", seed0), *metrics, status])
        if seeds > 1:
            ok = np.array([m for _, (m, st) in mine if st == "ok"], dtype=np.float64)
            mean = ok.mean(axis=0) if len(ok) else np.full(len(SWEEP_METRICS), np.nan)
            rows.append([*values, "mean", *mean, f"ok={len(ok)}/{len(mine)}"])
    return rows


def cmd_sweep(args) -> int:
    cfg, extras = _config_with_seed(args.config, args.seed)
    base = store.config_to_dict(cfg)
    grid_text = Path(args.grid).read_text() if Path(args.grid).is_file() else args.grid
    try:
        grid = json.loads(grid_text)
    except json.JSONDecodeError as exc:
        raise store.ConfigError(f"grid: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(grid, dict) or not all(isinstance(v, list) and v for v in grid.values()):
        raise store.ConfigError("grid must map config fields to non-empty lists")
    unknown = sorted(set(grid) - set(base))
    if unknown:
        raise store.ConfigError(f"unknown grid field(s): {', '.join(unknown)}")
    out = _out_dir(args.out, extras)
    rows = sweep(base, grid, out, args.seeds, args.jobs)
    store.write_csv(out / "sweep.csv", [*grid, "seed", *SWEEP_METRICS, "status"], rows)
    return EXIT_OK


# --------------------------------------------------------------------------


def _stderr(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ckgan", description="Kernel-critic GANs on 2D mixtures.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics for a checkpoint or the real data")
    e.add_argument("--checkpoint")
    e.add_argument("--config", help="config whose architecture the checkpoint must match")
    e.add_argument("--dataset", choices=datasets.DATASETS)
    e.add_argument("--n", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--real", action="store_true", help="evaluate fresh real samples instead")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="write generated points as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sample)

    w = sub.add_parser("sweep", help="train+eval over a parameter grid")
    w.add_argument("--config", required=True)
    w.add_argument("--grid", required=True, help="JSON object (inline or file) of field -> values")
    w.add_argument("--seeds", type=int, default=1)
    w.add_argument("--seed", type=int)
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)

    d = sub.add_parser("data", help="dataset utilities")
    dsub = d.add_subparsers(dest="data_command", required=True)
    x = dsub.add_parser("export", help="write dataset samples as CSV")
    x.add_argument("--dataset", choices=datasets.DATASETS)
    x.add_argument("--n", type=int)
    x.add_argument("--seed", type=int)
    x.add_argument("--config")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_data_export)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (store.ConfigError, store.CheckpointError, UsageError) as exc:
        _stderr(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
