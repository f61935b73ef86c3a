"""Command-line entry point: ``pgvl <command> [flags]``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigFileError, RunConfig, config_from_dict, load_config
from .harness import METRICS, MetricsReport, TrainingDiverged, alignment_maps, evaluate, summarize, train
from .model import ARCHITECTURES, init_model, model_forward
from .parse_graph import render_tree
from .synthetic import generate_scenes

log = logging.getLogger("pgvl")


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("PGVL_OUT") or "pgvl_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def config_digest(cfg: RunConfig) -> str:
    body = cfg.to_dict()
    body.pop("seed", None)
    body.pop("architecture", None)
    return hashlib.sha256(_dump(body).encode()).hexdigest()[:16]


def write_alignment_csv(maps: np.ndarray, out: Path, space: int | None = None) -> list[Path]:
    paths = []
    for level in range(maps.shape[0]):
        name = f"alignment_level{level}.csv" if space is None else f"alignment_space{space}_level{level}.csv"
        path = out / name
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["level", "joint", "row", "col", "similarity"])
            k, h, w = maps.shape[1:]
            for j in range(k):
                for r in range(h):
                    for c in range(w):
                        writer.writerow([level, j, r, c, repr(float(maps[level, j, r, c]))])
        paths.append(path)
    return paths


def _emit_alignment(cfg: RunConfig, params, out: Path, scene_index: int) -> list[Path]:
    spec = cfg.model_spec()
    if not spec.uses_pgvl:
        raise ValueError(f"architecture {spec.architecture!r} has no parse-graph fusion to trace")
    scene_cfg = cfg.scene_config()
    scenes = generate_scenes(scene_cfg, scene_index, 1)
    images, _ = scenes.batch([0])
    fwd = model_forward(spec, params, images, trace=True)
    paths = []
    multi = len(fwd.traces) > 1
    for i, tr in enumerate(fwd.traces, start=1):
        maps = alignment_maps(tr, (scene_cfg.height, scene_cfg.width))
        paths += write_alignment_csv(maps, out, space=i if multi else None)
    return paths


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    spec = cfg.model_spec()
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        def on_epoch(record):
            fh.write(_dump(record) + "\n")
            fh.flush()

        try:
            report, params = train(spec, cfg.train, cfg.loss, cfg.seed, on_epoch=on_epoch)
        except TrainingDiverged as exc:
            (out / "divergence.json").write_text(_dump(exc.report) + "\n")
            print(f"error: {exc}; diagnostics in {out / 'divergence.json'}", file=sys.stderr)
            return 3
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.pgvl"
    save_checkpoint(ckpt, params, cfg.to_dict())
    if args.trace:
        _emit_alignment(cfg, params, out, cfg.train.n_train)
    print(_dump({"architecture": report.architecture, "seed": report.seed, **report.final}))
    return 0


def _load_for_eval(args) -> tuple[RunConfig, object]:
    if not args.checkpoint:
        raise FileNotFoundError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, snapshot = load_checkpoint(path)
    if args.config:
        cfg = load_config(args.config)
    elif snapshot is not None:
        cfg = config_from_dict(snapshot)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg, params


def cmd_eval(args) -> int:
    cfg, params = _load_for_eval(args)
    spec = cfg.model_spec()
    scenes = generate_scenes(cfg.scene_config(), cfg.train.n_train, cfg.train.n_eval)
    metrics = evaluate(spec, params, scenes, cfg.train.pck_radius)
    print(_dump({"architecture": spec.architecture, "seed": cfg.seed, **metrics}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    archs = tuple(args.architectures.split(",")) if args.architectures else ARCHITECTURES
    for a in archs:
        if a not in ARCHITECTURES:
            raise ConfigFileError(f"unknown architecture {a!r}")
    seeds = (args.seed,) if args.seed is not None else cfg.train.seeds
    digest = config_digest(cfg)
    runs_path = out / "ablation_runs.jsonl"
    done: dict[tuple[str, int], dict] = {}
    if runs_path.exists():
        for line in runs_path.read_text().splitlines():
            rec = json.loads(line)
            if rec.get("config_digest") == digest:
                done[(rec["architecture"], rec["seed"])] = rec
    (out / "ablation_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    results: dict[str, list[MetricsReport]] = {}
    with open(runs_path, "a") as fh:
        for arch in archs:
            spec = cfg.model_spec(arch)
            for seed in seeds:
                rec = done.get((arch, seed))
                if rec is None:
                    report, _ = train(spec, cfg.train, cfg.loss, seed)
                    rec = {"architecture": arch, "seed": seed, "config_digest": digest, "final": report.final,
                           "seconds": report.seconds, "epochs": report.epochs}
                    fh.write(_dump(rec) + "\n")
                    fh.flush()
                    log.info("%s seed %d: %s (%.0fs)", arch, seed, report.final, report.seconds)
                results.setdefault(arch, []).append(
                    MetricsReport(arch, seed, rec["epochs"], rec["final"], rec["seconds"]))
    rows = summarize(results)
    with open(out / "ablation_table.csv", "w", newline="") as fh:
        fields = ["ablation", "seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    for row in rows:
        print(_dump(row))
    return 0


def cmd_gradcheck(args) -> int:
    return 0 if gradcheck.main(print) else 1


def cmd_inspect_graph(args) -> int:
    cfg = _config(args)
    for graph in cfg.variant_spec().graphs():
        print(render_tree(graph))
    return 0


def cmd_plot_data(args) -> int:
    if args.checkpoint:
        cfg, params = _load_for_eval(args)
    else:
        cfg = _config(args)
        params = init_model(cfg.model_spec(), np.random.default_rng([cfg.seed, 1]))
    out = _out_dir(args)
    index = cfg.train.n_train + args.scene
    for p in _emit_alignment(cfg, params, out, index):
        print(p)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "inspect-graph": cmd_inspect_graph,
    "plot-data": cmd_plot_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgvl", description="Parse-graph visual-language fusion experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default $PGVL_OUT or ./pgvl_out)")
        p.add_argument("--checkpoint", help="checkpoint path")
        p.add_argument("--trace", action="store_true", help="emit per-level alignment maps")
        if name == "ablate":
            p.add_argument("--architectures", help="comma-separated subset of " + ",".join(ARCHITECTURES))
        if name == "plot-data":
            p.add_argument("--scene", type=int, default=0, help="index into the evaluation scenes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigFileError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
