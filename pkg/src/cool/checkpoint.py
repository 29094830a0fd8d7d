"""Checkpoint container: magic header "COOLCKPT1" followed by a pickled
payload of plain dicts and numpy arrays.

The payload carries the config, the graph, the normalizer, best- and
last-epoch parameters, the optimizer state, and RNG snapshots. Evaluation and
prediction use the best-validation parameters; resuming uses the last-epoch
ones and continues the epoch counter.
"""

from __future__ import annotations

import pickle
from pathlib import Path
from typing import Any

import numpy as np
import torch

from cool.config import TrainConfig, config_from_mapping
from cool.data import Normalizer, RoadGraph
from cool.errors import DataError
from cool.model import COOLModel, build_model

MAGIC = b"COOLCKPT1"


def save_checkpoint(payload: dict[str, Any], path: str | Path) -> None:
    arrays = [payload.get("best_params"), payload.get("last_params")]
    for params in arrays:
        if params is None:
            continue
        for name, arr in params.items():
            if not np.all(np.isfinite(arr)):
                raise DataError(f"refusing to checkpoint non-finite parameter {name}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        pickle.dump(payload, fh, protocol=4)


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        return pickle.load(fh)


def checkpoint_config(payload: dict[str, Any]) -> TrainConfig:
    return config_from_mapping(payload["config"])


def checkpoint_graph(payload: dict[str, Any]) -> RoadGraph:
    return RoadGraph(node_ids=tuple(payload["node_ids"]), adjacency=payload["adjacency"])


def checkpoint_normalizer(payload: dict[str, Any]) -> Normalizer:
    return Normalizer(mean=payload["normalizer"]["mean"], std=payload["normalizer"]["std"])


def params_to_numpy(model: COOLModel) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def model_from_checkpoint(payload: dict[str, Any], which: str = "best") -> COOLModel:
    """Rebuild the model and load the requested parameter set bit-exactly."""
    config = checkpoint_config(payload)
    graph = checkpoint_graph(payload)
    model = build_model(config, graph, int(payload["n_features"]))
    params = payload[f"{which}_params"]
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in params.items()}
    model.load_state_dict(state, strict=True)
    return model


def to_numpy_tree(obj):
    """Recursively convert tensors to numpy (for pickling optimizer state)."""
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().numpy().copy()
    if isinstance(obj, dict):
        return {k: to_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        seq = [to_numpy_tree(v) for v in obj]
        return seq if isinstance(obj, list) else tuple(seq)
    return obj


def to_torch_tree(obj):
    if isinstance(obj, np.ndarray):
        return torch.from_numpy(obj.copy())
    if isinstance(obj, dict):
        return {k: to_torch_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        seq = [to_torch_tree(v) for v in obj]
        return seq if isinstance(obj, list) else tuple(seq)
    return obj
