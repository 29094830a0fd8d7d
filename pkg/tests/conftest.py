import dataclasses

import numpy as np
import pytest

from cool.config import TrainConfig
from cool.data import (
    RoadGraph,
    SyntheticSpec,
    TrafficSeries,
    generate_synthetic,
    prepare_datasets,
)


@pytest.fixture
def two_node_graph() -> RoadGraph:
    # single directed edge a -> b with weight 0.5
    return RoadGraph(
        adjacency=np.array([[0.0, 0.5], [0.0, 0.0]]), node_ids=("a", "b")
    )


def make_series(
    values: np.ndarray,
    mask: np.ndarray | None = None,
    interval_s: int = 300,
    start_epoch_s: int = 0,
) -> TrafficSeries:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[..., None]
    if mask is None:
        mask = np.ones(values.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = mask[..., None]
    return TrafficSeries(
        values=values, mask=mask, interval_s=interval_s, start_epoch_s=start_epoch_s
    )


def tiny_config(**overrides) -> TrainConfig:
    base = TrainConfig(
        d=8,
        prior_layers=1,
        ranks=(3,),
        windows=(4,),
        batch_size=16,
        epochs=2,
        input_steps=12,
        output_steps=4,
        seed=0,
    )
    return dataclasses.replace(base, **overrides).validated()


@pytest.fixture(scope="session")
def small_synth():
    """4 nodes, 2 days; enough windows for fast end-to-end tests."""
    spec = SyntheticSpec(lag_pairs=((0, 1, 6),), extra_edges=2)
    return generate_synthetic(4, 2, spec, seed=3)


@pytest.fixture(scope="session")
def small_datasets(small_synth):
    series, graph = small_synth
    cfg = tiny_config()
    return prepare_datasets(
        graph,
        series,
        t_in=cfg.input_steps,
        t_out=cfg.output_steps,
        ratios=cfg.split,
        train_stride=cfg.train_stride,
        eval_stride=cfg.eval_stride,
    )


def pytest_runtest_logreport(report):
    # One visible verdict line per acceptance criterion.
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1].removeprefix("test_")
        verdict = "PASS" if report.passed else "FAIL"
        print(f"\n[ACCEPT] {name}: {verdict}", flush=True)
