"""Self-attention decoder: multi-rank and multi-scale branches plus fusion.

Both branches see one node's posterior sequence U (T, d) at a time (node
independence; any leading batch/node dimensions broadcast). The rank branch
compresses keys and values along time with learned left matrices ((T/mu), T),
initialized near block averaging. The scale branch mean-pools U into T/eps
subsequence embeddings and self-attends over them. Each branch summarizes its
attention output by the mean over rows. Fusion softmax-combines the active
branch embeddings with learnable scalars.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from cool.errors import ConfigError
from cool.prior import resolve_activation


def _block_average(rows: int, t_in: int, factor: int) -> torch.Tensor:
    op = torch.zeros(rows, t_in, dtype=torch.float64)
    for r in range(rows):
        op[r, r * factor : (r + 1) * factor] = 1.0 / factor
    return op


def _square_init(d: int) -> torch.Tensor:
    m = torch.empty(d, d, dtype=torch.float64)
    nn.init.xavier_uniform_(m)
    return m


class RankBranch(nn.Module):
    """Low-rank attention: full-length queries against T/mu compressed keys."""

    def __init__(self, t_in: int, mu: int, d: int):
        super().__init__()
        if t_in % mu != 0:
            raise ConfigError(f"rank {mu} does not divide input_steps {t_in}")
        self.mu = mu
        rows = t_in // mu
        base = _block_average(rows, t_in, mu)
        self.key_left = nn.Parameter(base + 0.01 * torch.randn(rows, t_in, dtype=torch.float64))
        self.value_left = nn.Parameter(base + 0.01 * torch.randn(rows, t_in, dtype=torch.float64))
        self.query = nn.Parameter(_square_init(d))
        self.key = nn.Parameter(_square_init(d))
        self.value = nn.Parameter(_square_init(d))
        self.scale = 1.0 / math.sqrt(d)

    def forward(self, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """u (..., T, d) -> (summary (..., d), scores (..., T, T/mu))."""
        q = torch.matmul(u, self.query)
        k = torch.matmul(torch.matmul(self.key_left, u), self.key)
        v = torch.matmul(torch.matmul(self.value_left, u), self.value)
        scores = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1)
        attended = torch.matmul(scores, v)
        return attended.mean(dim=-2), scores


class ScaleBranch(nn.Module):
    """Self-attention over mean-pooled subsequences of length eps."""

    def __init__(self, t_in: int, eps: int, d: int):
        super().__init__()
        if t_in % eps != 0:
            raise ConfigError(f"window {eps} does not divide input_steps {t_in}")
        self.eps = eps
        self.rows = t_in // eps
        self.query = nn.Parameter(_square_init(d))
        self.key = nn.Parameter(_square_init(d))
        self.value = nn.Parameter(_square_init(d))
        self.scale = 1.0 / math.sqrt(d)

    def forward(self, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """u (..., T, d) -> (summary (..., d), scores (..., T/eps, T/eps))."""
        pooled = u.reshape(*u.shape[:-2], self.rows, self.eps, u.shape[-1]).mean(dim=-2)
        q = torch.matmul(pooled, self.query)
        k = torch.matmul(pooled, self.key)
        v = torch.matmul(pooled, self.value)
        scores = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1)
        attended = torch.matmul(scores, v)
        return attended.mean(dim=-2), scores


class FusionGate(nn.Module):
    """Softmax-weighted sum of branch summaries; weights are free scalars,
    one per active branch, initialized uniform."""

    def __init__(self, n_rank: int, n_scale: int):
        super().__init__()
        if n_rank + n_scale == 0:
            raise ConfigError("fusion needs at least one active branch")
        if n_rank:
            self.rank_logits = nn.Parameter(torch.zeros(n_rank, dtype=torch.float64))
        else:
            self.rank_logits = None
        if n_scale:
            self.scale_logits = nn.Parameter(torch.zeros(n_scale, dtype=torch.float64))
        else:
            self.scale_logits = None

    def coefficients(self) -> torch.Tensor:
        parts = [p for p in (self.rank_logits, self.scale_logits) if p is not None]
        return torch.softmax(torch.cat(parts), dim=0)

    def forward(self, summaries: list[torch.Tensor]) -> torch.Tensor:
        coef = self.coefficients()
        if len(summaries) != len(coef):
            raise ConfigError(
                f"fusion got {len(summaries)} summaries for {len(coef)} branches"
            )
        stacked = torch.stack(summaries, dim=-1)
        return torch.matmul(stacked, coef)


class PredictionHead(nn.Module):
    """Two-layer perceptron from (fused summary || final-step state)."""

    def __init__(self, d: int, hidden: int, t_out: int, n_features: int, activation: str):
        super().__init__()
        self.t_out = t_out
        self.n_features = n_features
        self.fc1 = nn.Linear(2 * d, hidden)
        self.fc2 = nn.Linear(hidden, t_out * n_features)
        self.act = resolve_activation(activation)

    def forward(self, fused: torch.Tensor, u_last: torch.Tensor) -> torch.Tensor:
        """(..., d), (..., d) -> (..., t_out, n_features)."""
        z = torch.cat([fused, u_last], dim=-1)
        out = self.fc2(self.act(self.fc1(z)))
        return out.reshape(*out.shape[:-1], self.t_out, self.n_features)
