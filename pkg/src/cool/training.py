"""End-to-end training: masked MAE objective, Adam updates with global-norm
clipping, per-epoch validation, best-checkpoint retention, resumable state.

One logical trainer owns the parameters; validation runs on a parameter
snapshot between epochs. Determinism contract: same config + data -> same
loss curve and the same checkpoint bytes on one machine.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from cool import __version__
from cool.checkpoint import (
    load_checkpoint,
    params_to_numpy,
    save_checkpoint,
    to_numpy_tree,
    to_torch_tree,
)
from cool.config import TrainConfig, config_to_dict
from cool.data import Datasets, batch_indices, stack_samples
from cool.errors import DataError, NumericError
from cool.evaluation import DEFAULT_HORIZONS, evaluate_samples_with_model
from cool.model import COOLModel, build_model

logger = logging.getLogger(__name__)


def mae_loss(predicted: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over masked-in entries, in normalized units."""
    if predicted.shape != target.shape:
        raise DataError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    m = mask.to(predicted.dtype)
    denom = m.sum()
    if denom == 0:
        raise DataError("target mask has no observed entries")
    return ((predicted - target).abs() * m).sum() / denom


@dataclass
class TrainResult:
    payload: dict[str, Any]
    log: list[dict[str, Any]]
    checkpoint_path: Path | None


def _param_norms(model: COOLModel) -> dict[str, float]:
    return {k: float(v.norm()) for k, v in model.state_dict().items()}


def train(
    config: TrainConfig,
    datasets: Datasets,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    config = config.validated()
    if not datasets.train:
        raise DataError("empty training split")
    if not datasets.val:
        raise DataError("empty validation split")

    model = build_model(config, datasets.graph, datasets.series_raw.n_features)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(config.seed)
    start_epoch = 0
    records: list[dict[str, Any]] = []

    if resume_from is not None:
        previous = load_checkpoint(resume_from)
        # Run length may grow on resume; everything that shapes the model or
        # the optimization must match what the checkpoint was built with.
        run_length = {"epochs", "early_stop_patience"}
        ours = {k: v for k, v in config_to_dict(config).items() if k not in run_length}
        theirs = {k: v for k, v in previous["config"].items() if k not in run_length}
        if ours != theirs:
            diff = sorted(k for k in ours if ours[k] != theirs.get(k))
            raise DataError(
                f"checkpoint config does not match the requested config (differs on: {', '.join(diff)})"
            )
        state = {k: torch.from_numpy(np.asarray(v)) for k, v in previous["last_params"].items()}
        model.load_state_dict(state, strict=True)
        optimizer.load_state_dict(to_torch_tree(previous["optimizer"]))
        torch.set_rng_state(torch.from_numpy(previous["torch_rng"].copy()))
        shuffle_rng.bit_generator.state = previous["shuffle_rng"]
        start_epoch = int(previous["epoch"])
        records = list(previous["log"])
        best_params = previous["best_params"]
        best_val = float(previous["best_val_mae"])
        best_epoch = int(previous["best_epoch"])
        logger.info("resumed from %s at epoch %d", resume_from, start_epoch)
    else:
        best_params = params_to_numpy(model)
        best_val = float("inf")
        best_epoch = 0

    out_path = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_path / "epochs.jsonl", "a")

    since_best = 0
    epoch = start_epoch
    try:
        for epoch in range(start_epoch + 1, config.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            losses = []
            for batch_no, idx in enumerate(
                batch_indices(len(datasets.train), config.batch_size, shuffle_rng)
            ):
                x, y, m = stack_samples(datasets.train, idx)
                optimizer.zero_grad()
                predicted = model(torch.from_numpy(x))
                loss = mae_loss(predicted, torch.from_numpy(y), torch.from_numpy(m))
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, batch {batch_no}; "
                        f"parameter norms: {_param_norms(model)}"
                    )
                loss.backward()
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                losses.append(float(loss.detach()))

            val_report = evaluate_samples_with_model(
                model,
                datasets.val,
                datasets.normalizer,
                horizons=range(1, config.output_steps + 1),
                mape_floor=config.mape_floor,
            )
            val_mae, val_rmse, val_mape = _pooled(val_report)
            record = {
                "epoch": epoch,
                "train_mae": float(np.mean(losses)),
                "val_mae": val_mae,
                "val_rmse": val_rmse,
                "val_mape": val_mape,
                "wall_seconds": time.perf_counter() - t0,
            }
            records.append(record)
            logger.info(
                "epoch %d: train_mae %.4f val_mae %.4f (%.1fs)",
                epoch, record["train_mae"], val_mae, record["wall_seconds"],
            )
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()

            if val_mae < best_val:
                best_val = val_mae
                best_epoch = epoch
                best_params = params_to_numpy(model)
                since_best = 0
            else:
                since_best += 1
                if (
                    config.early_stop_patience is not None
                    and since_best >= config.early_stop_patience
                ):
                    logger.info("early stop after %d stale epochs", since_best)
                    break
    finally:
        if log_fh is not None:
            log_fh.close()

    payload = {
        "package_version": __version__,
        "config": config_to_dict(config),
        "n_features": datasets.series_raw.n_features,
        "node_ids": list(datasets.graph.node_ids),
        "adjacency": datasets.graph.adjacency.copy(),
        "normalizer": {
            "mean": datasets.normalizer.mean.copy(),
            "std": datasets.normalizer.std.copy(),
        },
        "best_params": best_params,
        "last_params": params_to_numpy(model),
        "optimizer": to_numpy_tree(optimizer.state_dict()),
        "epoch": epoch,
        "best_epoch": best_epoch,
        "best_val_mae": best_val,
        "torch_rng": torch.get_rng_state().numpy().copy(),
        "shuffle_rng": shuffle_rng.bit_generator.state,
        "log": records,
    }
    path = None
    if out_path is not None:
        path = out_path / "checkpoint.ckpt"
        save_checkpoint(payload, path)
    return TrainResult(payload=payload, log=records, checkpoint_path=path)


def _pooled(report) -> tuple[float, float, float | None]:
    """Pool per-horizon metrics into single validation numbers."""
    hs = report.horizons
    if not hs:
        return float("nan"), float("nan"), None
    counts = np.array([m.count for m in hs.values()], dtype=np.float64)
    maes = np.array([m.mae for m in hs.values()])
    rmses = np.array([m.rmse for m in hs.values()])
    total = counts.sum()
    mae = float((maes * counts).sum() / total)
    rmse = float(np.sqrt((rmses**2 * counts).sum() / total))
    mapes = [(m.mape, m.count) for m in hs.values() if m.mape is not None]
    if mapes:
        mp = sum(v * c for v, c in mapes) / sum(c for _, c in mapes)
    else:
        mp = None
    return mae, rmse, mp
