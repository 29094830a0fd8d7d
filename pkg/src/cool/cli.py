"""Command-line entry point.

    cool synth   --out DIR [--nodes N --days D --seed S] [--config PATH] [--set k=v]...
    cool train   --data DIR --out DIR [--config PATH] [--set k=v]... [--profile tiny]
                 [--ablate STAGE]... [--resume CKPT] [--manifest PATH]
    cool eval    --checkpoint CKPT --data DIR --out DIR [--horizons 3,6,12 | 1..12]
    cool predict --checkpoint CKPT --data DIR --out DIR [--split test]
    cool plot    {prediction|attention|affinity} --checkpoint CKPT --data DIR --out DIR ...

Every run writes ``manifest.json`` (resolved configuration, seed, version) to
its output directory; ``--manifest`` reruns a command from such a file. Exit
codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
``COOL_NUM_THREADS`` caps torch's thread pool.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from cool import __version__
from cool.checkpoint import (
    checkpoint_config,
    checkpoint_normalizer,
    load_checkpoint,
)
from cool.config import (
    PROFILES,
    TrainConfig,
    config_from_mapping,
    config_to_dict,
    load_config_file,
    parse_set_overrides,
)
from cool.data import (
    Datasets,
    SyntheticSpec,
    generate_synthetic,
    load_adjacency,
    load_readings,
    prepare_datasets,
    save_adjacency,
    save_readings,
    stack_samples,
)
from cool.errors import ConfigError, DataError, NumericError
from cool.evaluation import (
    DEFAULT_HORIZONS,
    denormalized_predictions,
    evaluate,
    report_document,
)
from cool.plotting import render_affinity, render_attention, render_prediction
from cool.training import train

logger = logging.getLogger(__name__)

ABLATION_STAGES = ("prior", "posterior", "multi_rank", "multi_scale")

_SYNTH_DEFAULTS: dict[str, Any] = {
    "nodes": 8,
    "days": 14,
    "seed": 0,
    "format": "binary",
    **{f.name: f.default for f in dataclasses.fields(SyntheticSpec)},
}


def _write_manifest(out_dir: Path, manifest: dict[str, Any]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"package_version": __version__, **manifest}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _load_manifest(path: str, expected: str) -> dict[str, Any]:
    try:
        manifest = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("subcommand") != expected:
        raise ConfigError(
            f"manifest {path} is for {manifest.get('subcommand')!r}, not {expected!r}"
        )
    return manifest


# ---------------------------------------------------------------------------
# synth


def _synth_spec_from_mapping(mapping: dict[str, Any]) -> dict[str, Any]:
    merged = dict(_SYNTH_DEFAULTS)
    unknown = [k for k in mapping if k not in merged]
    if unknown:
        raise ConfigError(f"unknown synthetic spec keys: {', '.join(sorted(unknown))}")
    merged.update({k: v for k, v in mapping.items() if v is not None})
    return merged

def _coerce_tuple(value):
    if value is None or isinstance(value, (int, float)):
        return value
    return tuple(
        tuple(int(x) for x in item) if isinstance(item, (list, tuple)) else item
        for item in value
    )


def cmd_synth(args) -> int:
    if args.manifest:
        resolved = _load_manifest(args.manifest, "synth")["spec"]
    else:
        mapping: dict[str, Any] = {}
        if args.config:
            import yaml

            raw = yaml.safe_load(Path(args.config).read_text()) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"{args.config}: synthetic spec must be a mapping")
            mapping.update(raw)
        mapping.update(parse_set_overrides(args.set))
        for key in ("nodes", "days", "seed", "format"):
            value = getattr(args, key if key != "format" else "fmt")
            if value is not None:
                mapping[key] = value
        resolved = _synth_spec_from_mapping(
            {k: (json.loads(json.dumps(v)) if not isinstance(v, str) else v) for k, v in mapping.items()}
        )

    spec_fields = {f.name for f in dataclasses.fields(SyntheticSpec)}
    spec_kwargs = {k: v for k, v in resolved.items() if k in spec_fields}
    for key in ("base", "amplitude", "phase"):
        if isinstance(spec_kwargs.get(key), list):
            spec_kwargs[key] = tuple(float(v) for v in spec_kwargs[key])
    if spec_kwargs.get("lag_pairs") is not None:
        spec_kwargs["lag_pairs"] = _coerce_tuple(spec_kwargs["lag_pairs"])
    spec = SyntheticSpec(**spec_kwargs)
    series, graph = generate_synthetic(
        int(resolved["nodes"]), int(resolved["days"]), spec, seed=int(resolved["seed"])
    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_adjacency(graph, out_dir / "adjacency.txt")
    if resolved["format"] == "text":
        save_readings(series, out_dir / "readings.csv", node_ids=graph.node_ids, fmt="text")
    elif resolved["format"] == "binary":
        save_readings(series, out_dir / "readings.stts", fmt="binary")
    else:
        raise ConfigError(f"unknown readings format {resolved['format']!r}")
    _write_manifest(out_dir, {"subcommand": "synth", "seed": int(resolved["seed"]), "spec": resolved})
    print(
        f"synthetic dataset: {graph.n_nodes} nodes, {series.n_steps} steps "
        f"({resolved['days']} days at {spec.interval_s}s)"
    )
    print(f"pattern: {json.dumps({k: resolved[k] for k in sorted(resolved)}, default=str)}")
    print(f"wrote {out_dir}/adjacency.txt and readings ({resolved['format']})")
    return 0


# ---------------------------------------------------------------------------
# shared data plumbing


def _resolve_data_paths(args) -> tuple[Path, Path]:
    if getattr(args, "data", None):
        d = Path(args.data)
        adjacency = d / "adjacency.txt"
        if not adjacency.exists():
            raise DataError(f"{adjacency} not found")
        for name in ("readings.stts", "readings.csv", "readings.txt"):
            if (d / name).exists():
                return adjacency, d / name
        raise DataError(f"no readings file found in {d}")
    if not (getattr(args, "adjacency", None) and getattr(args, "readings", None)):
        raise ConfigError("provide --data DIR or both --adjacency and --readings")
    return Path(args.adjacency), Path(args.readings)


def _prepare_from_config(
    config: TrainConfig, adjacency: Path, readings: Path
) -> Datasets:
    graph = load_adjacency(adjacency)
    series = load_readings(readings, graph, sentinel=config.sentinel)
    return prepare_datasets(
        graph,
        series,
        t_in=config.input_steps,
        t_out=config.output_steps,
        ratios=config.split,
        train_stride=config.train_stride,
        eval_stride=config.eval_stride,
    )


def _datasets_for_checkpoint(payload: dict[str, Any], args) -> tuple[TrainConfig, Datasets]:
    config = checkpoint_config(payload)
    adjacency, readings = _resolve_data_paths(args)
    datasets = _prepare_from_config(config, adjacency, readings)
    if list(datasets.graph.node_ids) != list(payload["node_ids"]):
        raise DataError("data node ids do not match the checkpoint")
    ck_norm = checkpoint_normalizer(payload)
    if not (
        np.allclose(ck_norm.mean, datasets.normalizer.mean, atol=1e-9)
        and np.allclose(ck_norm.std, datasets.normalizer.std, atol=1e-9)
    ):
        raise DataError(
            "normalizer mismatch: this data was not what the checkpoint was trained on"
        )
    return config, datasets


def _split_samples(datasets: Datasets, split: str):
    try:
        return {"train": datasets.train, "val": datasets.val, "test": datasets.test}[split]
    except KeyError:
        raise ConfigError(f"unknown split {split!r}") from None


# ---------------------------------------------------------------------------
# train


def _resolve_train_config(args) -> TrainConfig:
    config = TrainConfig()
    if args.profile:
        if args.profile not in PROFILES:
            raise ConfigError(f"unknown profile {args.profile!r}")
        config = config_from_mapping(PROFILES[args.profile], config)
    if args.config:
        config = load_config_file(args.config, config)
    overrides = parse_set_overrides(args.set)
    if overrides:
        config = config_from_mapping(overrides, config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    for stage in args.ablate or []:
        if stage not in ABLATION_STAGES:
            raise ConfigError(f"unknown ablation stage {stage!r}; choose from {ABLATION_STAGES}")
        config = dataclasses.replace(config, **{f"use_{stage}": False})
    return config.validated()


def cmd_train(args) -> int:
    if args.manifest:
        manifest = _load_manifest(args.manifest, "train")
        config = config_from_mapping(manifest["config"]).validated()
        adjacency = Path(manifest["inputs"]["adjacency"])
        readings = Path(manifest["inputs"]["readings"])
    else:
        config = _resolve_train_config(args)
        adjacency, readings = _resolve_data_paths(args)

    out_dir = Path(args.out)
    _write_manifest(
        out_dir,
        {
            "subcommand": "train",
            "seed": config.seed,
            "config": config_to_dict(config),
            "inputs": {
                "adjacency": str(adjacency.resolve()),
                "readings": str(readings.resolve()),
            },
        },
    )
    datasets = _prepare_from_config(config, adjacency, readings)
    logger.info(
        "training on %d/%d/%d train/val/test windows",
        len(datasets.train), len(datasets.val), len(datasets.test),
    )
    result = train(config, datasets, out_dir=out_dir, resume_from=args.resume)
    print(
        f"finished epoch {result.payload['epoch']}; best val MAE "
        f"{result.payload['best_val_mae']:.4f} at epoch {result.payload['best_epoch']}"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


# ---------------------------------------------------------------------------
# eval / predict


def _parse_horizons(text: str | None, t_out: int):
    if text is None:
        return [h for h in DEFAULT_HORIZONS if h <= t_out]
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse horizons {text!r}") from None


def cmd_eval(args) -> int:
    if args.manifest:
        manifest = _load_manifest(args.manifest, "eval")
        args.checkpoint = manifest["inputs"]["checkpoint"]
        args.data = None
        args.adjacency = manifest["inputs"]["adjacency"]
        args.readings = manifest["inputs"]["readings"]
        args.horizons = manifest.get("horizons_raw")
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    payload = load_checkpoint(args.checkpoint)
    config, datasets = _datasets_for_checkpoint(payload, args)
    horizons = _parse_horizons(args.horizons, config.output_steps)

    t0 = time.perf_counter()
    report = evaluate(payload, datasets.test, horizons=horizons, mape_floor=config.mape_floor)
    wall = time.perf_counter() - t0

    adjacency, readings = _resolve_data_paths(args)
    out_dir = Path(args.out)
    _write_manifest(
        out_dir,
        {
            "subcommand": "eval",
            "seed": config.seed,
            "config": config_to_dict(config),
            "horizons_raw": args.horizons,
            "inputs": {
                "checkpoint": str(Path(args.checkpoint).resolve()),
                "adjacency": str(adjacency.resolve()),
                "readings": str(readings.resolve()),
            },
        },
    )
    doc = report_document(
        report,
        dataset=str(readings),
        config=config_to_dict(config),
        wall_seconds=wall,
    )
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
    (out_dir / "report.txt").write_text(report.table() + "\n")
    print(report.table())
    return 0


def cmd_predict(args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    payload = load_checkpoint(args.checkpoint)
    config, datasets = _datasets_for_checkpoint(payload, args)
    samples = _split_samples(datasets, args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    predicted = denormalized_predictions(payload, samples)
    _, y, mask = stack_samples(samples)
    truth = checkpoint_normalizer(payload).denormalize(y)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    adjacency, readings = _resolve_data_paths(args)
    _write_manifest(
        out_dir,
        {
            "subcommand": "predict",
            "seed": config.seed,
            "split": args.split,
            "config": config_to_dict(config),
            "inputs": {
                "checkpoint": str(Path(args.checkpoint).resolve()),
                "adjacency": str(adjacency.resolve()),
                "readings": str(readings.resolve()),
            },
        },
    )
    np.savez(
        out_dir / "predictions.npz",
        predictions=predicted,
        truth=truth,
        mask=mask,
        window_starts=np.array([s.window_start for s in samples]),
    )
    print(f"wrote predictions for {len(samples)} windows to {out_dir}/predictions.npz")
    return 0


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    payload = load_checkpoint(args.checkpoint)
    _, datasets = _datasets_for_checkpoint(payload, args)
    samples = datasets.test
    out_dir = Path(args.out)
    if args.kind == "prediction":
        paths = render_prediction(
            payload, samples, args.sensor, out_dir, max_windows=args.max_windows
        )
    elif args.kind == "attention":
        paths = render_attention(
            payload, samples, args.sensor, out_dir, window=args.window, scale=args.scale
        )
    elif args.kind == "affinity":
        paths = render_affinity(payload, samples, out_dir, window=args.window)
    else:  # argparse choices make this unreachable
        raise ConfigError(f"unknown plot kind {args.kind!r}")
    adjacency, readings = _resolve_data_paths(args)
    _write_manifest(
        out_dir,
        {
            "subcommand": "plot",
            "kind": args.kind,
            "sensor": args.sensor,
            "window": getattr(args, "window", None),
            "scale": getattr(args, "scale", None),
            "inputs": {
                "checkpoint": str(Path(args.checkpoint).resolve()),
                "adjacency": str(adjacency.resolve()),
                "readings": str(readings.resolve()),
            },
        },
    )
    for role, path in paths.items():
        print(f"{role}: {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cool",
        description="Conjoint spatio-temporal graph network for traffic forecasting",
    )
    parser.add_argument("--version", action="version", version=f"cool {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--manifest", default=None, help="rerun from a manifest file")
        p.add_argument("--data", default=None, help="dataset directory (adjacency.txt + readings)")
        p.add_argument("--adjacency", default=None)
        p.add_argument("--readings", default=None)
        if checkpoint:
            p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--config", default=None, help="synthetic spec file (flat YAML)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--nodes", type=int, default=None)
    p.add_argument("--days", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--format", dest="fmt", choices=("binary", "text"), default=None)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--config", default=None, help="training config file (flat YAML)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--profile", default=None, help="preset: tiny")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablate", action="append", default=[], choices=ABLATION_STAGES)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--horizons", default=None, help="e.g. 3,6,12 or 1..12")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", help="write model predictions")
    common(p, checkpoint=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("plot", help="emit a figure with a numeric sidecar")
    p.add_argument("kind", choices=("prediction", "attention", "affinity"))
    common(p, checkpoint=True)
    p.add_argument("--sensor", default=None, help="sensor id (defaults to the first)")
    p.add_argument("--window", type=int, default=0, help="test window index")
    p.add_argument("--scale", type=int, default=None, help="restrict attention plot to one scale")
    p.add_argument("--max-windows", type=int, default=None)
    p.set_defaults(handler=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("COOL_NUM_THREADS")
    try:
        if threads:
            try:
                import torch

                torch.set_num_threads(int(threads))
            except ValueError:
                raise ConfigError(f"COOL_NUM_THREADS must be an integer, got {threads!r}")
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # argparse exits 2 on bad flags
            return int(exc.code or 0)
        if args.out is None:
            args.out = f"cool_{args.subcommand}"
        return args.handler(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
