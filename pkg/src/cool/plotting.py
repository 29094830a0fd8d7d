"""Figure emission. Every image gets a numeric sidecar (CSV) so tests can
check the plotted values without pixel comparison."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from cool.checkpoint import checkpoint_config, checkpoint_normalizer, model_from_checkpoint
from cool.data import Normalizer, Sample, stack_samples
from cool.errors import ConfigError, DataError
from cool.evaluation import denormalized_predictions

_SAVETXT = {"delimiter": ",", "fmt": "%.17g"}


def _resolve_sensor(node_ids: Sequence[str], sensor: str | None) -> int:
    if sensor is None:
        return 0
    if sensor in node_ids:
        return list(node_ids).index(sensor)
    raise DataError(f"sensor {sensor!r} not in the dataset")


def render_prediction(
    payload: dict[str, Any],
    samples: Sequence[Sample],
    sensor: str | None,
    out_dir: Path,
    max_windows: int | None = None,
) -> dict[str, Path]:
    """Overlay truth vs prediction for one sensor over stitched windows.

    Samples are expected non-overlapping (evaluation stride); the sidecar
    holds exactly the plotted numbers.
    """
    node_ids = payload["node_ids"]
    node = _resolve_sensor(node_ids, sensor)
    if max_windows is not None:
        samples = list(samples)[:max_windows]
    if not samples:
        raise DataError("no samples to plot")
    normalizer = checkpoint_normalizer(payload)
    config = checkpoint_config(payload)
    predicted = denormalized_predictions(payload, samples)  # (S, T_out, N, F)
    _, y, mask = stack_samples(list(samples))
    truth = normalizer.denormalize(y)

    steps, pred_tr, truth_tr, observed = [], [], [], []
    for i, s in enumerate(samples):
        t0 = s.window_start + config.input_steps
        for k in range(predicted.shape[1]):
            steps.append(t0 + k)
            pred_tr.append(predicted[i, k, node, 0])
            truth_tr.append(truth[i, k, node, 0])
            observed.append(1.0 if mask[i, k, node, 0] else 0.0)
    table = np.column_stack([steps, truth_tr, pred_tr, observed])

    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"prediction_{node_ids[node]}.csv"
    np.savetxt(csv_path, table, header="step,truth,predicted,observed", **_SAVETXT)

    fig, ax = plt.subplots(figsize=(10, 4))
    obs = np.asarray(observed, dtype=bool)
    t = np.asarray(steps, dtype=float)
    truth_masked = np.where(obs, np.asarray(truth_tr), np.nan)
    ax.plot(t, truth_masked, label="ground truth", lw=1.2)
    ax.plot(t, pred_tr, label="prediction", lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("reading")
    ax.set_title(f"sensor {node_ids[node]}")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / f"prediction_{node_ids[node]}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"image": png_path, "sidecar": csv_path}


def _detailed_single(payload: dict[str, Any], sample: Sample):
    model = model_from_checkpoint(payload, which="best")
    model.eval()
    x, _, _ = stack_samples([sample])
    with torch.no_grad():
        return model.forward_detailed(torch.from_numpy(x))


def render_attention(
    payload: dict[str, Any],
    samples: Sequence[Sample],
    sensor: str | None,
    out_dir: Path,
    window: int = 0,
    scale: int | None = None,
) -> dict[str, Path]:
    """Per-scale attention heatmaps for one sensor and one window."""
    node_ids = payload["node_ids"]
    node = _resolve_sensor(node_ids, sensor)
    config = checkpoint_config(payload)
    if not config.use_multi_scale:
        raise ConfigError("attention plot needs the multi-scale branch enabled")
    scales = list(config.windows) if scale is None else [scale]
    if scale is not None and scale not in config.windows:
        raise ConfigError(f"scale {scale} not among the model's windows {config.windows}")
    if not (0 <= window < len(samples)):
        raise DataError(f"window {window} outside 0..{len(samples) - 1}")
    detail = _detailed_single(payload, samples[window])

    out_dir.mkdir(parents=True, exist_ok=True)
    out: dict[str, Path] = {}
    fig, axes = plt.subplots(1, len(scales), figsize=(4 * len(scales), 3.5), squeeze=False)
    for ax, eps in zip(axes[0], scales):
        grid = detail["attention"][f"scale{eps}"][0, node].numpy()
        csv_path = out_dir / f"attention_scale{eps}.csv"
        np.savetxt(csv_path, grid, header=f"scale {eps} attention rows", **_SAVETXT)
        out[f"sidecar_scale{eps}"] = csv_path
        im = ax.imshow(grid, cmap="viridis", vmin=0.0)
        ax.set_title(f"window size {eps}")
        ax.set_xlabel("key")
        ax.set_ylabel("query")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.suptitle(f"sensor {node_ids[node]}, window {window}")
    fig.tight_layout()
    png_path = out_dir / "attention.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    out["image"] = png_path
    return out


def render_affinity(
    payload: dict[str, Any],
    samples: Sequence[Sample],
    out_dir: Path,
    window: int = 0,
) -> dict[str, Path]:
    """Affinity matrix aggregated over time offsets into an N x N heatmap."""
    config = checkpoint_config(payload)
    if not config.use_posterior:
        raise ConfigError("affinity plot needs the posterior stage enabled")
    if not (0 <= window < len(samples)):
        raise DataError(f"window {window} outside 0..{len(samples) - 1}")
    detail = _detailed_single(payload, samples[window])
    affinity = detail["pair"][0][0].numpy()  # (rN, rN)
    n = len(payload["node_ids"])
    r = affinity.shape[0] // n
    view = affinity.reshape(r, n, r, n).mean(axis=(0, 2))

    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "affinity.csv"
    np.savetxt(csv_path, view, header="affinity aggregated over time offsets", **_SAVETXT)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(view, cmap="magma", vmin=0.0)
    ax.set_xlabel("node")
    ax.set_ylabel("node")
    ax.set_title(f"affinity (window {window})")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    png_path = out_dir / "affinity.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"image": png_path, "sidecar": csv_path}
