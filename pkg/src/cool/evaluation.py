"""Masked metrics at fixed horizons, the Historical-Average baseline, and
report assembly.

All metrics run on denormalized arrays. MAE and RMSE average over masked-in
entries; MAPE additionally requires |truth| above a small floor so that
near-zero readings cannot blow it up. A horizon with no valid entries is
reported absent rather than zero.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from cool.checkpoint import (
    checkpoint_normalizer,
    model_from_checkpoint,
)
from cool.data import Normalizer, Sample, TrafficSeries, stack_samples
from cool.errors import ConfigError, DataError
from cool.model import predict_samples

DEFAULT_HORIZONS = (3, 6, 12)
DEFAULT_MAPE_FLOOR = 1e-3


@dataclass(frozen=True)
class HorizonMetrics:
    mae: float
    rmse: float
    mape: float | None  # None when no entry clears the floor
    count: int

    def as_dict(self) -> dict[str, Any]:
        return {"mae": self.mae, "rmse": self.rmse, "mape": self.mape, "count": self.count}


@dataclass(frozen=True)
class MetricReport:
    horizons: dict[int, HorizonMetrics]

    def as_dict(self) -> dict[str, Any]:
        return {str(h): m.as_dict() for h, m in sorted(self.horizons.items())}

    def table(self) -> str:
        lines = [f"{'horizon':>8} {'MAE':>10} {'RMSE':>10} {'MAPE %':>10} {'count':>8}"]
        for h, m in sorted(self.horizons.items()):
            mape = f"{m.mape:10.4f}" if m.mape is not None else f"{'n/a':>10}"
            lines.append(f"{h:>8} {m.mae:10.4f} {m.rmse:10.4f} {mape} {m.count:>8}")
        return "\n".join(lines)


def metrics(
    predicted: np.ndarray,
    truth: np.ndarray,
    mask: np.ndarray,
    horizons: Sequence[int] = DEFAULT_HORIZONS,
    mape_floor: float = DEFAULT_MAPE_FLOOR,
) -> MetricReport:
    """Per-horizon masked MAE/RMSE/MAPE for (S, T_out, N, F) arrays."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if predicted.shape != truth.shape or truth.shape != mask.shape:
        raise DataError("prediction, truth, and mask shapes must agree")
    t_out = predicted.shape[1]
    out: dict[int, HorizonMetrics] = {}
    for h in horizons:
        if not (1 <= h <= t_out):
            raise ConfigError(f"horizon {h} outside 1..{t_out}")
        m = mask[:, h - 1]
        if not m.any():
            continue
        err = predicted[:, h - 1][m] - truth[:, h - 1][m]
        y = truth[:, h - 1][m]
        mae = float(np.abs(err).mean())
        rmse = float(np.sqrt((err**2).mean()))
        valid = np.abs(y) > mape_floor
        mape = float((np.abs(err[valid] / y[valid])).mean() * 100.0) if valid.any() else None
        out[h] = HorizonMetrics(mae=mae, rmse=rmse, mape=mape, count=int(m.sum()))
    return MetricReport(horizons=out)


# ---------------------------------------------------------------------------
# historical average


class HistoricalAverage:
    """Per-node time-of-week slot means over the training portion.

    Slots are defined by the absolute step index (start // interval + step),
    so the series start must be aligned to the interval. Training spans under
    one week fall back to time-of-day slots; empty slots fall back to the
    node's global training mean.
    """

    def __init__(self, train_series: TrafficSeries):
        s = train_series
        if s.start_epoch_s % s.interval_s != 0:
            raise DataError("series start must be aligned to the interval")
        week = 7 * 86400
        if week % s.interval_s != 0:
            raise DataError("interval must divide one week")
        span_s = s.n_steps * s.interval_s
        period = week if span_s >= week else 86400
        if period % s.interval_s != 0:
            raise DataError("interval must divide one day")
        self.slots = period // s.interval_s
        self.offset = s.start_epoch_s // s.interval_s
        sums = np.zeros((self.slots, s.n_nodes, s.n_features))
        counts = np.zeros((self.slots, s.n_nodes, s.n_features))
        slot_of_step = (self.offset + np.arange(s.n_steps)) % self.slots
        observed = np.where(s.mask, s.values, 0.0)
        np.add.at(sums, slot_of_step, observed)
        np.add.at(counts, slot_of_step, s.mask.astype(np.float64))
        total = counts.sum(axis=0)
        if np.any(total == 0):
            raise DataError("some node/feature has no observed training entries")
        self.global_mean = sums.sum(axis=0) / total
        with np.errstate(invalid="ignore"):
            means = sums / counts
        self.slot_means = np.where(counts > 0, means, self.global_mean[None])

    def predict_steps(self, step_indices: np.ndarray) -> np.ndarray:
        """Predictions for step indices counted from the series start."""
        slots = (self.offset + np.asarray(step_indices, dtype=np.int64)) % self.slots
        return self.slot_means[slots]


def historical_average(
    train_series: TrafficSeries, step_indices: np.ndarray
) -> np.ndarray:
    return HistoricalAverage(train_series).predict_steps(step_indices)


def ha_predictions_for_samples(
    ha: HistoricalAverage, samples: Sequence[Sample], t_in: int
) -> np.ndarray:
    """Stack HA predictions aligned with each sample's target window."""
    out = [
        ha.predict_steps(s.window_start + t_in + np.arange(s.y.shape[0]))
        for s in samples
    ]
    return np.stack(out)


# ---------------------------------------------------------------------------
# model evaluation


def denormalized_predictions(
    payload: dict[str, Any], samples: Sequence[Sample], batch_size: int = 64
) -> np.ndarray:
    """Single source of truth for model outputs in original units; the eval
    report, the predict command, and the prediction plot all read this."""
    model = model_from_checkpoint(payload, which="best")
    normalizer = checkpoint_normalizer(payload)
    predicted = predict_samples(model, list(samples), batch_size=batch_size)
    return normalizer.denormalize(predicted)


def evaluate_samples_with_model(
    model,
    samples: Sequence[Sample],
    normalizer: Normalizer,
    horizons: Sequence[int] = DEFAULT_HORIZONS,
    mape_floor: float = DEFAULT_MAPE_FLOOR,
    batch_size: int = 64,
) -> MetricReport:
    """Metrics for an in-memory model (used for per-epoch validation)."""
    predicted = normalizer.denormalize(
        predict_samples(model, list(samples), batch_size=batch_size)
    )
    _, y, mask = stack_samples(list(samples))
    truth = normalizer.denormalize(y)
    return metrics(predicted, truth, mask, horizons=horizons, mape_floor=mape_floor)


def evaluate(
    payload: dict[str, Any],
    samples: Sequence[Sample],
    horizons: Sequence[int] = DEFAULT_HORIZONS,
    batch_size: int = 64,
    mape_floor: float | None = None,
) -> MetricReport:
    """Evaluate a checkpoint on normalized samples; metrics in original units."""
    if not samples:
        raise DataError("no samples to evaluate")
    normalizer = checkpoint_normalizer(payload)
    if mape_floor is None:
        mape_floor = float(payload["config"].get("mape_floor", DEFAULT_MAPE_FLOOR))
    predicted = denormalized_predictions(payload, samples, batch_size=batch_size)
    _, y, mask = stack_samples(list(samples))
    truth = normalizer.denormalize(y)
    return metrics(predicted, truth, mask, horizons=horizons, mape_floor=mape_floor)


def evaluate_baseline(
    ha: HistoricalAverage,
    samples: Sequence[Sample],
    normalizer: Normalizer,
    t_in: int,
    horizons: Sequence[int] = DEFAULT_HORIZONS,
    mape_floor: float = DEFAULT_MAPE_FLOOR,
) -> MetricReport:
    """Run the baseline through the same metrics path as the model."""
    predicted = ha_predictions_for_samples(ha, samples, t_in)
    _, y, mask = stack_samples(list(samples))
    truth = normalizer.denormalize(y)
    return metrics(predicted, truth, mask, horizons=horizons, mape_floor=mape_floor)


def report_document(
    report: MetricReport,
    dataset: str,
    config: dict[str, Any],
    wall_seconds: float,
) -> dict[str, Any]:
    """Machine-readable report: dataset, config hash, metrics, wall time."""
    blob = json.dumps(config, sort_keys=True).encode()
    return {
        "dataset": dataset,
        "config_hash": hashlib.sha256(blob).hexdigest()[:16],
        "horizons": report.as_dict(),
        "wall_seconds": wall_seconds,
    }
