"""The assembled forecasting network.

Pipeline per window: flatten the input to (window step, node) pairs, project
features, run prior message passing over the heterogeneous template, build the
affinity/penalty pair, apply the closed-form posterior update, then decode
each node's posterior sequence with the rank/scale attention branches, fuse,
and map (fused summary || final-step state) to the output horizon.

Ablation switches drop whole stages: without the prior the projected inputs
stand in for the prior states; without the posterior the states are only
unit-normalized; a disabled branch family is removed from fusion entirely
(its parameters are never created).
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from cool.config import TrainConfig
from cool.data import RoadGraph, stack_samples
from cool.decoder import FusionGate, PredictionHead, RankBranch, ScaleBranch
from cool.errors import DataError
from cool.hetgraph import build_template
from cool.posterior import build_pair, normalize_states, posterior_update
from cool.prior import PriorStack, aggregation_matrix


class COOLModel(nn.Module):
    def __init__(self, config: TrainConfig, graph: RoadGraph, n_features: int):
        super().__init__()
        config.validated()
        self.config = config
        self.n_nodes = graph.n_nodes
        self.n_features = n_features
        d = config.d

        template = build_template(
            graph, config.input_steps, config.temporal_bidirectional
        )
        agg = torch.from_numpy(aggregation_matrix(template))
        # rebuilt from the graph on load; not worth persisting at (rN)^2 floats
        self.register_buffer("agg_matrix", agg, persistent=False)

        self.input_proj = nn.Linear(n_features, d)
        self.prior = (
            PriorStack(d, config.prior_layers, config.activation)
            if config.use_prior
            else None
        )
        if config.use_posterior:
            self.scoring_w = nn.Parameter(torch.ones(d, dtype=torch.float64))
        else:
            self.scoring_w = None
        self.rank_branches = (
            nn.ModuleList(RankBranch(config.input_steps, mu, d) for mu in config.ranks)
            if config.use_multi_rank
            else None
        )
        self.scale_branches = (
            nn.ModuleList(ScaleBranch(config.input_steps, eps, d) for eps in config.windows)
            if config.use_multi_scale
            else None
        )
        self.fusion = FusionGate(
            len(config.ranks) if config.use_multi_rank else 0,
            len(config.windows) if config.use_multi_scale else 0,
        )
        hidden = config.head_hidden if config.head_hidden is not None else d
        self.head = PredictionHead(
            d, hidden, config.output_steps, n_features, config.activation
        )
        self.double()

    def encode(self, x: torch.Tensor):
        """x (B, T, N, F) -> prior states, posterior states, (affinity, penalty).

        The pair is None when the posterior stage is ablated. Flat state index
        is t * n_nodes + node, matching the template.
        """
        b, t, n, f = x.shape
        if t != self.config.input_steps or n != self.n_nodes or f != self.n_features:
            raise DataError(
                f"expected input (B, {self.config.input_steps}, {self.n_nodes}, "
                f"{self.n_features}), got {tuple(x.shape)}"
            )
        h = self.input_proj(x.reshape(b, t * n, f))
        if self.prior is not None:
            h = self.prior(h, self.agg_matrix)
        if self.scoring_w is not None:
            pair = build_pair(h, self.scoring_w, self.config.top_k)
            u = posterior_update(h, *pair)
        else:
            pair = None
            u = normalize_states(h)
        return h, u, pair

    def decode(self, u: torch.Tensor):
        """Posterior states (B, rN, d) -> predictions (B, T_out, N, F) plus
        per-branch attention scores keyed by branch name."""
        b = u.shape[0]
        t, n = self.config.input_steps, self.n_nodes
        seq = u.reshape(b, t, n, -1).permute(0, 2, 1, 3)  # (B, N, T, d)
        summaries = []
        scores: dict[str, torch.Tensor] = {}
        if self.rank_branches is not None:
            for mu, branch in zip(self.config.ranks, self.rank_branches):
                summary, att = branch(seq)
                summaries.append(summary)
                scores[f"rank{mu}"] = att
        if self.scale_branches is not None:
            for eps, branch in zip(self.config.windows, self.scale_branches):
                summary, att = branch(seq)
                summaries.append(summary)
                scores[f"scale{eps}"] = att
        fused = self.fusion(summaries)
        prediction = self.head(fused, seq[:, :, -1, :])  # (B, N, T_out, F)
        return prediction.permute(0, 2, 1, 3), scores

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, u, _ = self.encode(x)
        prediction, _ = self.decode(u)
        return prediction

    def forward_detailed(self, x: torch.Tensor):
        """Forward pass that also returns the encoder/decoder internals
        (prior, posterior, affinity/penalty, attention scores) for plots."""
        h, u, pair = self.encode(x)
        prediction, scores = self.decode(u)
        return {
            "prediction": prediction,
            "prior": h,
            "posterior": u,
            "pair": pair,
            "attention": scores,
        }


def build_model(config: TrainConfig, graph: RoadGraph, n_features: int) -> COOLModel:
    """Construct with the config seed so parameter init is reproducible."""
    torch.manual_seed(config.seed)
    return COOLModel(config, graph, n_features)


def predict_samples(
    model: COOLModel, samples, batch_size: int = 64
) -> np.ndarray:
    """Run the model over samples; returns (S, T_out, N, F) in normalized units."""
    outs = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            x, _, _ = stack_samples(samples[i : i + batch_size])
            outs.append(model(torch.from_numpy(x)).numpy())
    return np.concatenate(outs, axis=0)
