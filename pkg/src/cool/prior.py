"""Prior message passing over the heterogeneous graph.

Layer update: aggregate = weighted mean of in-neighbor states (in-edge weights
normalized by their sum; nodes without in-edges aggregate to zero), then
state = activation(W_self h + W_agg aggregate + bias), with a residual
connection from the second layer on. Layer 0 is the input projection of the
raw features; with zero layers configured the projection is the output.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from cool.errors import ConfigError, NumericError
from cool.hetgraph import HetGraphTemplate, in_weight_matrix

_ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


def resolve_activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


def aggregation_matrix(template: HetGraphTemplate) -> np.ndarray:
    """Row-normalized in-weight matrix: row i holds the mean weights over
    node i's in-neighbors; all-zero rows stay zero (no in-edges)."""
    m = in_weight_matrix(template)
    totals = m.sum(axis=1, keepdims=True)
    np.divide(m, totals, out=m, where=totals > 0)
    return m


class PriorLayer(nn.Module):
    def __init__(self, d: int, activation: str):
        super().__init__()
        self.self_lin = nn.Linear(d, d)
        self.agg_lin = nn.Linear(d, d, bias=False)
        self.act = resolve_activation(activation)

    def forward(self, h, agg, residual: bool):
        neighbor_mean = torch.matmul(agg, h)
        out = self.act(self.self_lin(h) + self.agg_lin(neighbor_mean))
        return h + out if residual else out


class PriorStack(nn.Module):
    """The K message-passing layers (the input projection lives in the model,
    so ablating the prior keeps raw projected inputs available)."""

    def __init__(self, d: int, n_layers: int, activation: str):
        super().__init__()
        self.layers = nn.ModuleList(PriorLayer(d, activation) for _ in range(n_layers))

    def forward(self, h, agg):
        for k, layer in enumerate(self.layers):
            h = layer(h, agg, residual=k > 0)
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite prior state after layer {k + 1}")
        return h
