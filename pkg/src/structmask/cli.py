"""Command-line experiment runner.

    structmask train    --config FILE [--seed N] [--out DIR] [--override key=value ...] [--resume]
    structmask eval     --config FILE --mask mask.gldm [--params params.gldm] [--out DIR]
    structmask baseline --config FILE [--kind greedy|siman|random] [--out DIR]
    structmask sweep    --config FILE --field KEY --values a,b,c [--jobs N] [--out DIR]
    structmask mnist    --out DIR

Every run writes ``metrics.csv`` and ``manifest.txt`` (config hash, seed and
the SHA-256 of every file written) into ``--out``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import fileio
from .config import ExperimentConfig, load_config
from .errors import StructmaskError
from .problems import Problem

log = logging.getLogger("structmask")


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise StructmaskError(f"--override expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, extra: dict[str, str] | None = None) -> ExperimentConfig:
    ov = _overrides(args.override)
    if args.seed is not None:
        ov["seed"] = str(args.seed)
    ov.update(extra or {})
    return load_config(args.config, ov)


def _mask_images(problem: Problem, masks: dict, out: Path) -> list[str]:
    """PGM images of every mask: the full matrix, plus one image per row for image experiments."""
    cfg = problem.cfg
    folder = out / "masks"
    folder.mkdir(parents=True, exist_ok=True)
    names = []
    for key, mask in masks.items():
        mask = np.asarray(mask, dtype=np.float64)
        full = mask if mask.ndim == 2 else mask.reshape(1, -1)
        if mask.ndim == 1 and cfg.image_mode and mask.size == cfg.height * cfg.width:
            full = mask.reshape(cfg.height, cfg.width)
        fileio.write_pgm(folder / f"{key}.pgm", full)
        names.append(f"masks/{key}.pgm")
        if cfg.image_mode and mask.ndim == 2 and mask.shape[1] == cfg.height * cfg.width:
            for i, row in enumerate(mask):
                fileio.write_pgm(folder / f"{key}_row{i:03d}.pgm", row.reshape(cfg.height, cfg.width))
                names.append(f"masks/{key}_row{i:03d}.pgm")
    return names


def _finish(cfg: ExperimentConfig, out: Path, history: list[dict], files: list[str], extra=()) -> None:
    (out / "metrics.csv").write_text(fileio.metrics_csv(history, extra))
    (out / "config.txt").write_text(cfg.to_text())
    fileio.write_manifest(out, cfg.sha256(), cfg.seed, ["metrics.csv", "config.txt"] + files)


def run_train(cfg: ExperimentConfig, out: Path, resume: bool = False) -> list[dict]:
    from .training import train

    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, out_dir=out, resume=resume)
    problem = Problem(cfg)
    files = ["checkpoint.gldm", "checkpoint.json", "mask.gldm"]
    fileio.write_matrix(out / "mask.gldm", problem.pack_masks(result.masks))
    if result.params:
        fileio.write_matrix(out / "params.gldm", np.stack([result.params["gamma"], result.params["rho"]]))
        files.append("params.gldm")
    files += _mask_images(problem, result.masks, out)
    if not (out / "checkpoint.gldm").exists():  # zero epochs: nothing was checkpointed
        files = [f for f in files if not f.startswith("checkpoint")]
    _finish(cfg, out, result.history, files)
    if result.aborted:
        log.error("training diverged; results are from epoch %d", result.epochs_completed)
    return result.history


def run_eval(cfg: ExperimentConfig, out: Path, mask_path, params_path=None) -> list[dict]:
    from .training import _history_rows, _streams, evaluate, measurement_rows, problem_noise
    from .problems import make_data
    from .training import search_scale

    out.mkdir(parents=True, exist_ok=True)
    problem = Problem(cfg)
    masks = problem.unpack_masks(fileio.read_matrix(mask_path))
    params = problem.solver.init_params() or None
    if params_path is not None:
        gamma, rho = fileio.read_matrix(params_path)
        params = {"gamma": gamma, "rho": rho}
    rng = _streams(cfg.seed)
    source, X_test = make_data(cfg, rng["test_data"])
    noise = problem_noise(problem)
    Z_test = noise.standard((measurement_rows(problem), X_test.shape[0]), rng["test_noise"])
    if cfg.scale > 0:
        scale = cfg.scale
    else:
        probe = source.sample(min(cfg.batch_size, 512), rng["probe"])
        Zp = noise.standard((measurement_rows(problem), probe.shape[0]), rng["probe"])
        scale = search_scale(problem, masks, probe, Zp, params)
    history = _history_rows(0, "test", evaluate(problem, masks, scale, X_test, Z_test, params), cfg.seed)
    history += _history_rows(0, "test", {"scale": scale}, cfg.seed)
    _finish(cfg, out, history, _mask_images(problem, masks, out))
    return history


def run_baseline(cfg: ExperimentConfig, out: Path, kind: str | None = None) -> list[dict]:
    from .baselines import run_baseline as search

    out.mkdir(parents=True, exist_ok=True)
    result = search(cfg, kind)
    problem = Problem(cfg)
    fileio.write_matrix(out / "mask.gldm", problem.pack_masks(result.masks))
    files = ["mask.gldm"] + _mask_images(problem, result.masks, out)
    _finish(cfg, out, result.history, files)
    return result.history


def _sweep_point(args):
    cfg, out = args
    return run_train(cfg, out)


def run_sweep(cfg: ExperimentConfig, out: Path, field: str, values: list[str], jobs: int = 1) -> list[dict]:
    """Train once per value of ``field``; with ``jobs > 1`` points run concurrently on split seeds."""
    from .config import parse_value

    out.mkdir(parents=True, exist_ok=True)
    points = []
    seeds = [cfg.seed] * len(values)
    if jobs > 1:
        seeds = [int(c.generate_state(1, dtype=np.uint32)[0])
                 for c in np.random.SeedSequence(cfg.seed).spawn(len(values))]
    for v, seed in zip(values, seeds):
        point = cfg.replace(**{field: parse_value(field, v)}, seed=seed).validate()
        points.append((point, out / f"{field}={v}"))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            histories = list(pool.map(_sweep_point, points))
    else:
        histories = [_sweep_point(p) for p in points]
    rows = []
    for v, hist in zip(values, histories):
        rows += [{field: v, **r} for r in hist]
    (out / "metrics.csv").write_text(fileio.metrics_csv(rows, (field,)))
    (out / "config.txt").write_text(cfg.to_text())
    files = ["metrics.csv", "config.txt"] + [f"{field}={v}/manifest.txt" for v in values]
    fileio.write_manifest(out, cfg.sha256(), cfg.seed, files)
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structmask", description="Learn structured binary measurement masks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("train", help="learn a mask (and solver parameters)")
    common(sp, "runs/train")
    sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    sp = sub.add_parser("eval", help="evaluate a saved mask on the test set")
    common(sp, "runs/eval")
    sp.add_argument("--mask", required=True)
    sp.add_argument("--params", default=None, help="learned solver parameters (params.gldm)")
    sp = sub.add_parser("baseline", help="greedy / simulated-annealing / random mask baselines")
    common(sp, "runs/baseline")
    sp.add_argument("--kind", choices=("greedy", "siman", "random"), default=None)
    sp = sub.add_parser("sweep", help="train once per value of one config field")
    common(sp, "runs/sweep")
    sp.add_argument("--field", required=True)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--jobs", type=int, default=1, help="concurrent points (uses split seeds)")
    sp = sub.add_parser("mnist", help="write the MNIST sample bundled with mlxtend as IDX files")
    sp.add_argument("--out", default="data")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "mnist":
            from .data import mnist_subset_to_idx
            images, labels = mnist_subset_to_idx(args.out)
            print(images)
            print(labels)
            return 0
        cfg = _config(args)
        out = Path(args.out)
        if args.command == "train":
            run_train(cfg, out, args.resume)
        elif args.command == "eval":
            run_eval(cfg, out, args.mask, args.params)
        elif args.command == "baseline":
            run_baseline(cfg, out, args.kind)
        else:
            if args.jobs < 1:
                raise StructmaskError("--jobs must be >= 1")
            run_sweep(cfg, out, args.field, [v.strip() for v in args.values.split(",") if v.strip()], args.jobs)
    except (StructmaskError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
