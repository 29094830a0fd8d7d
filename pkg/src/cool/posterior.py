"""Affinity/penalty graph construction and the closed-form posterior update.

States are scored pairwise by the cosine of their w-scaled versions. Positive
scores populate the affinity matrix, negated negative scores the penalty
matrix; the two supports are disjoint by construction and the diagonal is
zero (the update below already carries the node's own state). The posterior
update attracts affinity neighbors, repels penalty neighbors, and projects
onto the unit sphere:

    u_i = (h_i + sum_j W[i,j] h_j - sum_j P[i,j] h_j) / ||...||_2

A raw norm under 1e-12 falls back to the normalized prior state (logged); if
that is degenerate too, the update fails. All functions accept an optional
leading batch dimension.
"""

from __future__ import annotations

import logging
import math

import torch

from cool.errors import NumericError

logger = logging.getLogger(__name__)

# way below any meaningful scale; only guards the division for all-zero rows
_NORM_FLOOR = 1e-150
DEGENERATE_NORM = 1e-12


def correlation_score(h_a: torch.Tensor, h_b: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of the w-scaled vectors; zero-norm inputs score 0."""
    a = h_a * w
    b = h_b * w
    na = a.norm()
    nb = b.norm()
    if na == 0 or nb == 0:
        logger.warning("correlation score of a zero-norm scaled state defined as 0")
        return torch.zeros((), dtype=h_a.dtype, device=h_a.device)
    return torch.clamp((a * b).sum() / (na * nb), -1.0, 1.0)


def score_matrix(h: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """All pairwise scores for states h (..., n, d) -> (..., n, n)."""
    scaled = h * w
    norms = scaled.norm(dim=-1, keepdim=True)
    n_zero = int((norms == 0).sum())
    if n_zero:
        logger.warning("%d zero-norm scaled states; their scores are 0", n_zero)
    unit = scaled / norms.clamp_min(_NORM_FLOOR)
    return torch.matmul(unit, unit.transpose(-1, -2)).clamp(-1.0, 1.0)


def build_pair(
    h: torch.Tensor, w: torch.Tensor, top_k: int | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Affinity and penalty matrices over all ordered pairs of distinct states.

    ``top_k`` keeps only the k largest-magnitude scores per row (off by
    default; desk-scale graphs are fine dense).
    """
    scores = score_matrix(h, w)
    n = scores.shape[-1]
    eye = torch.eye(n, dtype=torch.bool, device=scores.device)
    scores = scores.masked_fill(eye, 0.0)
    if top_k is not None and top_k < n - 1:
        kth = scores.abs().topk(top_k, dim=-1).values[..., -1:]
        scores = scores * (scores.abs() >= kth)
    affinity = torch.relu(scores)
    penalty = torch.relu(-scores)
    return affinity, penalty


def posterior_update(
    h: torch.Tensor, affinity: torch.Tensor, penalty: torch.Tensor
) -> torch.Tensor:
    """Closed-form unit-norm posterior states for h (..., n, d)."""
    raw = h + torch.matmul(affinity, h) - torch.matmul(penalty, h)
    norms = raw.norm(dim=-1, keepdim=True)
    degenerate = norms < DEGENERATE_NORM
    if degenerate.any():
        n_bad = int(degenerate.sum())
        logger.warning("%d degenerate posterior states; falling back to prior", n_bad)
        h_norms = h.norm(dim=-1, keepdim=True)
        if bool((degenerate & (h_norms < DEGENERATE_NORM)).any()):
            raise NumericError(
                "posterior update degenerate and the prior state has no direction either"
            )
        raw = torch.where(degenerate, h, raw)
        norms = raw.norm(dim=-1, keepdim=True)
    return raw / norms


def normalize_states(h: torch.Tensor) -> torch.Tensor:
    """Plain unit-norm projection (the posterior with empty graphs)."""
    norms = h.norm(dim=-1, keepdim=True)
    if bool((norms < DEGENERATE_NORM).any()):
        raise NumericError("cannot normalize a zero-norm state")
    return h / norms


def correlation_loss(
    posterior: torch.Tensor,
    prior: torch.Tensor,
    affinity: torch.Tensor,
    penalty: torch.Tensor,
    beta: float = 1.0,
) -> torch.Tensor:
    """Diagnostic objective: affinity-weighted squared distances minus
    penalty-weighted ones plus beta times the self anchor term. Not part of
    the training loss; the posterior update is its sphere-constrained
    minimizer in closed form."""
    u2 = (posterior * posterior).sum(-1).unsqueeze(-1)
    h2 = (prior * prior).sum(-1).unsqueeze(-2)
    cross = torch.matmul(posterior, prior.transpose(-1, -2))
    sq_dist = u2 + h2 - 2.0 * cross
    affinity_term = (affinity * sq_dist).sum((-1, -2))
    penalty_term = (penalty * sq_dist).sum((-1, -2))
    anchor = ((posterior - prior) ** 2).sum((-1, -2))
    return (affinity_term - penalty_term + beta * anchor).sum()
