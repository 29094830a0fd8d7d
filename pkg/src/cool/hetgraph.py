"""Heterogeneous spatio-temporal graph template.

The template connects r consecutive time layers of the sensor graph. Within a
layer, node i points at node j with weight A[i, j] (the adjacency as given, no
symmetrization). Between consecutive layers every node points at its own next
occurrence with weight 1; a flag adds the reverse temporal edges. The flat
index of (node i, time offset t) is t * n_nodes + i.

Templates depend only on (adjacency, r, flag); they are immutable and shared
across windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cool.data import RoadGraph
from cool.errors import ConfigError

KIND_SPATIAL = 0
KIND_TEMPORAL = 1
_KIND_NAMES = {KIND_SPATIAL: "spatial", KIND_TEMPORAL: "temporal"}


@dataclass(frozen=True)
class HetGraphTemplate:
    r: int
    n_nodes: int
    src: np.ndarray     # (n_edges,) flat indices
    dst: np.ndarray     # (n_edges,)
    weight: np.ndarray  # (n_edges,) float64
    kind: np.ndarray    # (n_edges,) uint8, KIND_SPATIAL or KIND_TEMPORAL

    @property
    def n_hetnodes(self) -> int:
        return self.r * self.n_nodes

    @property
    def n_edges(self) -> int:
        return len(self.src)


def flat_index(node_index: int, time_offset: int, n_nodes: int) -> int:
    return time_offset * n_nodes + node_index


def build_template(
    graph: RoadGraph, r: int, temporal_bidirectional: bool = False
) -> HetGraphTemplate:
    """Spatial edges replicate A in every layer; temporal edges link each node
    to itself one step later (both ways if the flag is set)."""
    if r < 1:
        raise ConfigError(f"window length r must be >= 1, got {r}")
    n = graph.n_nodes
    rows, cols = np.nonzero(graph.adjacency)
    weights = graph.adjacency[rows, cols]

    src_parts, dst_parts, w_parts, kind_parts = [], [], [], []
    offsets = np.arange(r) * n
    # spatial: one copy of the nonzero pattern per layer
    src_parts.append((offsets[:, None] + rows[None, :]).ravel())
    dst_parts.append((offsets[:, None] + cols[None, :]).ravel())
    w_parts.append(np.tile(weights, r))
    kind_parts.append(np.full(r * len(rows), KIND_SPATIAL, dtype=np.uint8))

    if r > 1:
        nodes = np.arange(n)
        fw_src = (offsets[:-1, None] + nodes[None, :]).ravel()
        fw_dst = (offsets[1:, None] + nodes[None, :]).ravel()
        src_parts.append(fw_src)
        dst_parts.append(fw_dst)
        w_parts.append(np.ones(len(fw_src)))
        kind_parts.append(np.full(len(fw_src), KIND_TEMPORAL, dtype=np.uint8))
        if temporal_bidirectional:
            src_parts.append(fw_dst)
            dst_parts.append(fw_src)
            w_parts.append(np.ones(len(fw_src)))
            kind_parts.append(np.full(len(fw_src), KIND_TEMPORAL, dtype=np.uint8))

    return HetGraphTemplate(
        r=r,
        n_nodes=n,
        src=np.concatenate(src_parts).astype(np.int64),
        dst=np.concatenate(dst_parts).astype(np.int64),
        weight=np.concatenate(w_parts).astype(np.float64),
        kind=np.concatenate(kind_parts),
    )


def neighborhoods(template: HetGraphTemplate) -> list[list[tuple[int, int, float]]]:
    """In-neighbor lists per flat index, each entry (node_index, time_offset,
    weight), sorted by the neighbor's flat index."""
    n = template.n_nodes
    result: list[list[tuple[int, int, float]]] = [[] for _ in range(template.n_hetnodes)]
    order = np.argsort(template.src, kind="stable")
    for e in order:
        s = int(template.src[e])
        result[int(template.dst[e])].append((s % n, s // n, float(template.weight[e])))
    return result


def in_weight_matrix(template: HetGraphTemplate) -> np.ndarray:
    """Dense M with M[dst, src] = weight; rows collect each node's in-edges."""
    m = np.zeros((template.n_hetnodes, template.n_hetnodes))
    m[template.dst, template.src] = template.weight
    return m


def dump_template(template: HetGraphTemplate) -> str:
    """Debug edge list: kind,src_node,src_t,dst_node,dst_t,weight."""
    n = template.n_nodes
    lines = ["kind,src_node,src_t,dst_node,dst_t,weight"]
    for s, d, w, k in zip(template.src, template.dst, template.weight, template.kind):
        lines.append(
            f"{_KIND_NAMES[int(k)]},{s % n},{s // n},{d % n},{d // n},{w:.17g}"
        )
    return "\n".join(lines) + "\n"
