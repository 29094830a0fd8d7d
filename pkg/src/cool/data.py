"""Dataset I/O: on-disk formats, normalization, windowing, and the synthetic generator.

Two readings formats are supported:

* text: header ``timestamp,<node>:<feature>,...``, one row per step, missing
  entries encoded by the sentinel value;
* binary: magic ``STTS1``, little-endian u32 n_steps/n_nodes/n_features,
  u64 epoch-seconds start, u32 interval-seconds, row-major float64 values,
  then the observation mask bit-packed.

The adjacency format is text: line 1 is the comma-separated node ids,
every following line is ``src_id,dst_id,weight``.

All functions here are pure and safe to call concurrently on distinct inputs.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from cool.errors import ConfigError, DataError

READINGS_MAGIC = b"STTS1"
DEFAULT_SENTINEL = 0.0


# ---------------------------------------------------------------------------
# core containers


@dataclass(frozen=True)
class RoadGraph:
    """Static sensor graph with a weighted (possibly asymmetric) adjacency."""

    node_ids: tuple[str, ...]
    adjacency: np.ndarray  # (n_nodes, n_nodes) float64, nonnegative

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=np.float64)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "node_ids", tuple(str(i) for i in self.node_ids))
        n = len(self.node_ids)
        if n < 1:
            raise DataError("graph needs at least one node")
        if len(set(self.node_ids)) != n:
            raise DataError("node ids must be unique")
        if adj.shape != (n, n):
            raise DataError(f"adjacency shape {adj.shape} does not match {n} node ids")
        if not np.all(np.isfinite(adj)):
            raise DataError("adjacency contains non-finite entries")
        if np.any(adj < 0):
            raise DataError("adjacency contains negative weights")

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


@dataclass(frozen=True)
class TrafficSeries:
    """Readings over time: values (n_steps, n_nodes, n_features) plus mask.

    ``mask`` is True where a reading was observed. Masked-out entries must be
    ignored by every statistic computed from the series.
    """

    values: np.ndarray
    mask: np.ndarray
    interval_s: int
    start_epoch_s: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        if values.ndim != 3:
            raise DataError(f"values must be (steps, nodes, features), got shape {values.shape}")
        if values.shape != mask.shape:
            raise DataError("values and mask shapes differ")
        if values.shape[0] < 1:
            raise DataError("series must contain at least one step")
        if self.interval_s <= 0:
            raise DataError("interval must be positive")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class Normalizer:
    """Per-feature z-score parameters fitted on the training fraction only."""

    mean: np.ndarray  # (n_features,)
    std: np.ndarray   # (n_features,), strictly positive

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if np.any(self.std <= 0):
            raise DataError("normalizer std must be strictly positive")

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass(frozen=True)
class Sample:
    """One training/evaluation window: x strictly precedes y."""

    x: np.ndarray       # (t_in, n_nodes, n_features)
    y: np.ndarray       # (t_out, n_nodes, n_features)
    y_mask: np.ndarray  # (t_out, n_nodes, n_features) bool
    window_start: int


# ---------------------------------------------------------------------------
# adjacency format


def load_adjacency(path: str | Path) -> RoadGraph:
    """Parse the edge-list text format into a RoadGraph."""
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty adjacency file")
    node_ids = [tok.strip() for tok in lines[0].split(",")]
    if any(not tok for tok in node_ids):
        raise DataError(f"{path}: blank node id in header")
    index = {nid: i for i, nid in enumerate(node_ids)}
    if len(index) != len(node_ids):
        raise DataError(f"{path}: duplicate node id in header")
    n = len(node_ids)
    adj = np.zeros((n, n), dtype=np.float64)
    seen: set[tuple[str, str]] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = [tok.strip() for tok in line.split(",")]
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'src,dst,weight', got {line!r}")
        src, dst, wtok = parts
        if src not in index:
            raise DataError(f"{path}:{lineno}: unknown node id {src!r}")
        if dst not in index:
            raise DataError(f"{path}:{lineno}: unknown node id {dst!r}")
        if (src, dst) in seen:
            raise DataError(f"{path}:{lineno}: duplicate edge ({src}, {dst})")
        seen.add((src, dst))
        try:
            w = float(wtok)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad weight {wtok!r}") from exc
        if not np.isfinite(w):
            raise DataError(f"{path}:{lineno}: non-finite weight")
        if w < 0:
            raise DataError(f"{path}:{lineno}: negative weight {w} on edge ({src}, {dst})")
        adj[index[src], index[dst]] = w
    return RoadGraph(node_ids=tuple(node_ids), adjacency=adj)


def save_adjacency(graph: RoadGraph, path: str | Path) -> None:
    """Write the edge-list text format; only nonzero entries are emitted."""
    path = Path(path)
    lines = [",".join(graph.node_ids)]
    rows, cols = np.nonzero(graph.adjacency)
    for i, j in zip(rows.tolist(), cols.tolist()):
        lines.append(f"{graph.node_ids[i]},{graph.node_ids[j]},{graph.adjacency[i, j]:.17g}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# readings formats


def _parse_timestamp(token: str, where: str) -> int:
    token = token.strip()
    try:
        return int(token)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(token)
    except ValueError as exc:
        raise DataError(f"{where}: cannot parse timestamp {token!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def load_readings(
    path: str | Path,
    graph: RoadGraph,
    sentinel: float | None = DEFAULT_SENTINEL,
) -> TrafficSeries:
    """Load readings in either format, masking sentinel-valued entries.

    ``sentinel=None`` disables sentinel masking for the text format. The
    binary format stores its mask explicitly and ignores ``sentinel``.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(READINGS_MAGIC))
    if magic == READINGS_MAGIC:
        return _load_readings_binary(path, graph)
    return _load_readings_text(path, graph, sentinel)


def _load_readings_binary(path: Path, graph: RoadGraph) -> TrafficSeries:
    raw = path.read_bytes()
    header = struct.Struct("<5sIIIQI")
    if len(raw) < header.size:
        raise DataError(f"{path}: truncated binary readings file")
    magic, n_steps, n_nodes, n_features, start, interval = header.unpack_from(raw, 0)
    if magic != READINGS_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if n_nodes != graph.n_nodes:
        raise DataError(f"{path}: file has {n_nodes} nodes, graph has {graph.n_nodes}")
    count = n_steps * n_nodes * n_features
    offset = header.size
    need = count * 8
    if len(raw) < offset + need:
        raise DataError(f"{path}: truncated values block")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(
        n_steps, n_nodes, n_features
    )
    offset += need
    mask_bytes = (count + 7) // 8
    if len(raw) < offset + mask_bytes:
        raise DataError(f"{path}: truncated mask block")
    packed = np.frombuffer(raw, dtype=np.uint8, count=mask_bytes, offset=offset)
    mask = np.unpackbits(packed, count=count).astype(bool).reshape(n_steps, n_nodes, n_features)
    return TrafficSeries(
        values=values.copy(), mask=mask, interval_s=int(interval), start_epoch_s=int(start)
    )


def _load_readings_text(path: Path, graph: RoadGraph, sentinel: float | None) -> TrafficSeries:
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) < 2:
        raise DataError(f"{path}: need a header and at least one data row")
    header = [tok.strip() for tok in lines[0].split(",")]
    if header[0] != "timestamp":
        raise DataError(f"{path}: first column must be 'timestamp', got {header[0]!r}")
    n_cols = len(header) - 1
    if n_cols % graph.n_nodes != 0:
        raise DataError(
            f"{path}: {n_cols} value columns not divisible by {graph.n_nodes} nodes"
        )
    n_features = n_cols // graph.n_nodes
    # columns are grouped per node in graph order; feature labels are free-form
    # but must repeat identically for every node
    col_nodes, col_feats = [], []
    for col in header[1:]:
        node_id, sep, feat = col.partition(":")
        if not sep:
            raise DataError(f"{path}: column {col!r} is not of the form node_id:feature")
        col_nodes.append(node_id)
        col_feats.append(feat)
    expected_nodes = [nid for nid in graph.node_ids for _ in range(n_features)]
    if col_nodes != expected_nodes:
        raise DataError(f"{path}: column header does not match the graph's node ids")
    feature_labels = col_feats[:n_features]
    if col_feats != feature_labels * graph.n_nodes:
        raise DataError(f"{path}: feature labels differ between nodes")

    timestamps: list[int] = []
    rows: list[list[float]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns")
        timestamps.append(_parse_timestamp(parts[0], f"{path}:{lineno}"))
        try:
            rows.append([float(tok) for tok in parts[1:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad value") from exc

    ts = np.asarray(timestamps, dtype=np.int64)
    if len(ts) < 2:
        raise DataError(f"{path}: need at least two rows to infer the interval")
    deltas = np.diff(ts)
    if np.any(deltas <= 0):
        raise DataError(f"{path}: timestamps must be strictly increasing")
    if np.any(deltas != deltas[0]):
        raise DataError(f"{path}: non-uniform interval between steps")

    values = np.asarray(rows, dtype=np.float64).reshape(len(ts), graph.n_nodes, n_features)
    if sentinel is None:
        mask = np.ones_like(values, dtype=bool)
    else:
        mask = values != sentinel
    return TrafficSeries(
        values=values, mask=mask, interval_s=int(deltas[0]), start_epoch_s=int(ts[0])
    )


def save_readings(
    series: TrafficSeries,
    path: str | Path,
    node_ids: Sequence[str] | None = None,
    fmt: str = "binary",
    sentinel: float = DEFAULT_SENTINEL,
) -> None:
    """Write readings. Text needs node ids for its header and encodes missing
    entries by the sentinel, so an observed value equal to the sentinel cannot
    round-trip and is rejected; use the binary format for such data."""
    path = Path(path)
    if fmt == "binary":
        header = struct.pack(
            "<5sIIIQI",
            READINGS_MAGIC,
            series.n_steps,
            series.n_nodes,
            series.n_features,
            series.start_epoch_s,
            series.interval_s,
        )
        packed = np.packbits(series.mask.astype(np.uint8).ravel())
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(series.values, dtype="<f8").tobytes())
            fh.write(packed.tobytes())
        return
    if fmt != "text":
        raise ConfigError(f"unknown readings format {fmt!r}")
    if node_ids is None:
        raise ConfigError("text readings format needs node ids for its header")
    if len(node_ids) != series.n_nodes:
        raise DataError("node id count does not match the series")
    if np.any(series.mask & (series.values == sentinel)):
        raise DataError(
            "an observed value equals the sentinel; text format cannot represent it"
        )
    cols = [f"{nid}:{f}" for nid in node_ids for f in range(series.n_features)]
    out = ["timestamp," + ",".join(cols)]
    flat = np.where(series.mask, series.values, sentinel).reshape(series.n_steps, -1)
    for step in range(series.n_steps):
        ts = series.start_epoch_s + step * series.interval_s
        out.append(str(ts) + "," + ",".join(f"{v:.17g}" for v in flat[step]))
    path.write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# normalization and windowing


def fit_normalizer(series: TrafficSeries, train_fraction: float) -> Normalizer:
    """Per-feature mean/std over masked-in entries of the leading steps."""
    if not (0 < train_fraction <= 1):
        raise ConfigError(f"train_fraction must be in (0, 1], got {train_fraction}")
    n_train = int(round(train_fraction * series.n_steps))
    n_train = max(n_train, 1)
    values = series.values[:n_train]
    mask = series.mask[:n_train]
    mean = np.empty(series.n_features)
    std = np.empty(series.n_features)
    for f in range(series.n_features):
        observed = values[..., f][mask[..., f]]
        if observed.size == 0:
            raise DataError(f"feature {f}: no observed entries in the training fraction")
        mean[f] = observed.mean()
        std[f] = observed.std()
        if std[f] < 1e-12:
            raise DataError(f"feature {f}: degenerate (constant) training values")
    return Normalizer(mean=mean, std=std)


def normalize_series(series: TrafficSeries, normalizer: Normalizer) -> TrafficSeries:
    return dataclasses.replace(series, values=normalizer.normalize(series.values))


def make_windows(series: TrafficSeries, t_in: int, t_out: int, stride: int = 1) -> list[Sample]:
    """Slice the series into (x, y) windows ordered by start index."""
    if t_in < 1 or t_out < 1:
        raise ConfigError("window lengths must be positive")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    total = t_in + t_out
    if total > series.n_steps:
        raise DataError(
            f"series has {series.n_steps} steps; windows need at least {total}"
        )
    samples = []
    for start in range(0, series.n_steps - total + 1, stride):
        samples.append(
            Sample(
                x=series.values[start : start + t_in],
                y=series.values[start + t_in : start + total],
                y_mask=series.mask[start + t_in : start + total],
                window_start=start,
            )
        )
    return samples


def split_chronological(
    samples: Sequence[Sample], ratios: tuple[float, float, float]
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Contiguous train/val/test partition of windows ordered by start."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    starts = [s.window_start for s in samples]
    if starts != sorted(starts):
        raise DataError("samples must be ordered by window_start")
    n = len(samples)
    n_train = int(round(ratios[0] * n))
    n_val = int(round((ratios[0] + ratios[1]) * n)) - n_train
    n_test = n - n_train - n_val
    if n_train < 1 or n_val < 1 or n_test < 1:
        raise DataError(
            f"split of {n} samples by {ratios} leaves an empty partition "
            f"({n_train}/{n_val}/{n_test})"
        )
    train = list(samples[:n_train])
    val = list(samples[n_train : n_train + n_val])
    test = list(samples[n_train + n_val :])
    return train, val, test


def batch_indices(
    n: int, batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[np.ndarray]:
    """Deterministic batch order, optionally shuffled by a seeded generator."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def stack_samples(
    samples: Sequence[Sample], idx: Sequence[int] | np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into (x, y, y_mask) batch arrays."""
    chosen = samples if idx is None else [samples[int(i)] for i in idx]
    x = np.stack([s.x for s in chosen])
    y = np.stack([s.y for s in chosen])
    m = np.stack([s.y_mask for s in chosen])
    return x, y, m


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Pattern of the synthetic series.

    Each node carries a daily sinusoid ``base + amplitude * sin(2*pi*t/day + phase)``
    plus Gaussian noise. A lag pair (src, dst, lag) overwrites dst with an exact
    shifted copy of src's realized series (signal plus src's noise) and adds
    dst's own independent noise on top; dst's own base/amplitude/phase are
    ignored. Noise is drawn on an index range extended to the left by the
    largest lag, so the shifted copy is exact from the first emitted step.
    """

    base: float | tuple[float, ...] | None = None          # None: 3 + i/2 per node
    amplitude: float | tuple[float, ...] = 1.0
    phase: tuple[float, ...] | None = None                  # None: evenly spread
    noise_std: float = 0.1
    lag_pairs: tuple[tuple[int, int, int], ...] = ((0, 1, 12), (2, 3, 12))
    extra_edges: int | None = None                          # None: one per node
    interval_s: int = 300
    start_epoch_s: int = 0


def _per_node(value, n_nodes: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(n_nodes, float(arr))
    if arr.shape != (n_nodes,):
        raise ConfigError(f"{name} must be scalar or length {n_nodes}, got shape {arr.shape}")
    return arr


def generate_synthetic(
    n_nodes: int,
    n_days: int,
    spec: SyntheticSpec | None = None,
    seed: int = 0,
) -> tuple[TrafficSeries, RoadGraph]:
    """Deterministic synthetic dataset: daily sinusoids, lag pairs, ring graph."""
    spec = spec or SyntheticSpec()
    if n_nodes < 2:
        raise ConfigError("synthetic generation requires at least 2 nodes")
    if n_days < 1:
        raise ConfigError("n_days must be >= 1")
    if spec.noise_std < 0:
        raise ConfigError("noise_std must be nonnegative")
    if 86400 % spec.interval_s != 0:
        raise ConfigError("interval must divide one day")
    steps_per_day = 86400 // spec.interval_s
    n_steps = n_days * steps_per_day

    base = _per_node(
        spec.base if spec.base is not None else 3.0 + 0.5 * np.arange(n_nodes),
        n_nodes,
        "base",
    )
    amplitude = _per_node(spec.amplitude, n_nodes, "amplitude")
    if spec.phase is None:
        phase = 2.0 * np.pi * np.arange(n_nodes) / n_nodes
    else:
        phase = _per_node(spec.phase, n_nodes, "phase")

    destinations = set()
    sources = set()
    for src, dst, lag in spec.lag_pairs:
        if not (0 <= src < n_nodes and 0 <= dst < n_nodes):
            raise ConfigError(f"lag pair ({src}, {dst}) out of node range")
        if src == dst:
            raise ConfigError("lag pair source and destination must differ")
        if lag < 1:
            raise ConfigError("lag must be >= 1")
        if dst in destinations:
            raise ConfigError(f"node {dst} is the destination of two lag pairs")
        destinations.add(dst)
        sources.add(src)
    if destinations & sources:
        raise ConfigError("lag-pair chains are not supported (a dst is also a src)")

    rng = np.random.default_rng(seed)
    max_lag = max((lag for _, _, lag in spec.lag_pairs), default=0)
    t = np.arange(-max_lag, n_steps, dtype=np.float64)
    signal = (
        base[:, None]
        + amplitude[:, None] * np.sin(2.0 * np.pi * t[None, :] / steps_per_day + phase[:, None])
        + rng.normal(0.0, spec.noise_std, (n_nodes, t.size))
    )
    for src, dst, lag in spec.lag_pairs:
        own = rng.normal(0.0, spec.noise_std, t.size)
        # positions below `lag` would index before the extended range; they are
        # never emitted because the output starts at position max_lag >= lag
        signal[dst, lag:] = signal[src, : t.size - lag] + own[lag:]

    values = signal[:, max_lag:].T[..., None]  # (n_steps, n_nodes, 1)
    series = TrafficSeries(
        values=values,
        mask=np.ones_like(values, dtype=bool),
        interval_s=spec.interval_s,
        start_epoch_s=spec.start_epoch_s,
    )

    adj = np.zeros((n_nodes, n_nodes))
    for i in range(n_nodes):
        adj[i, (i + 1) % n_nodes] = 1.0
    for src, dst, lag in spec.lag_pairs:
        adj[src, dst] = 1.0
    n_extra = spec.extra_edges if spec.extra_edges is not None else n_nodes
    candidates = [
        (i, j)
        for i in range(n_nodes)
        for j in range(n_nodes)
        if i != j and adj[i, j] == 0
    ]
    if candidates and n_extra > 0:
        pick = rng.choice(len(candidates), size=min(n_extra, len(candidates)), replace=False)
        for c in np.sort(pick):
            i, j = candidates[int(c)]
            adj[i, j] = rng.uniform(0.3, 1.0)
    graph = RoadGraph(node_ids=tuple(f"s{i}" for i in range(n_nodes)), adjacency=adj)
    return series, graph


# ---------------------------------------------------------------------------
# end-to-end preparation


@dataclass(frozen=True)
class Datasets:
    """Everything the trainer and evaluator need, windows already normalized."""

    graph: RoadGraph
    series_raw: TrafficSeries
    normalizer: Normalizer
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    train_fraction: float


def prepare_datasets(
    graph: RoadGraph,
    series: TrafficSeries,
    t_in: int,
    t_out: int,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    train_stride: int = 1,
    eval_stride: int | None = None,
) -> Datasets:
    """Normalize, window, and split. Training windows advance by
    ``train_stride``; val/test windows are thinned to ``eval_stride``
    (default ``t_out``) so evaluation traces do not overlap."""
    if series.n_nodes != graph.n_nodes:
        raise DataError("series and graph disagree on the node count")
    normalizer = fit_normalizer(series, ratios[0])
    normalized = normalize_series(series, normalizer)
    samples = make_windows(normalized, t_in, t_out, stride=train_stride)
    train, val, test = split_chronological(samples, ratios)
    step = eval_stride if eval_stride is not None else t_out
    val = _thin(val, step)
    test = _thin(test, step)
    return Datasets(
        graph=graph,
        series_raw=series,
        normalizer=normalizer,
        train=train,
        val=val,
        test=test,
        train_fraction=ratios[0],
    )


def _thin(samples: list[Sample], step: int) -> list[Sample]:
    if not samples or step <= 1:
        return samples
    first = samples[0].window_start
    return [s for s in samples if (s.window_start - first) % step == 0]
