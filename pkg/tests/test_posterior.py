import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cool.errors import NumericError
from cool.posterior import (
    build_pair,
    correlation_loss,
    correlation_score,
    normalize_states,
    posterior_update,
    score_matrix,
)


def _rand_states(n, d, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, d, dtype=torch.float64, generator=g)


# ---------------------------------------------------------------------------
# scoring


def test_self_similarity_is_one():
    h = torch.tensor([0.3, -1.2, 4.0], dtype=torch.float64)
    w = torch.ones(3, dtype=torch.float64)
    assert float(correlation_score(h, h, w)) == pytest.approx(1.0, abs=1e-12)


def test_antipodal_is_minus_one():
    h = torch.tensor([1.0, 2.0], dtype=torch.float64)
    w = torch.ones(2, dtype=torch.float64)
    assert float(correlation_score(h, -h, w)) == pytest.approx(-1.0, abs=1e-12)


def test_hand_cosine():
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    b = torch.tensor([1.0, 1.0], dtype=torch.float64)
    w = torch.ones(2, dtype=torch.float64)
    assert float(correlation_score(a, b, w)) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_zero_norm_scores_zero():
    a = torch.zeros(3, dtype=torch.float64)
    b = torch.ones(3, dtype=torch.float64)
    w = torch.ones(3, dtype=torch.float64)
    assert float(correlation_score(a, b, w)) == 0.0
    # also via the w-scaling path: w zeroes out the only nonzero coordinate
    c = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    w2 = torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64)
    assert float(correlation_score(c, b, w2)) == 0.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_scale_invariance(seed, scale):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(6, dtype=torch.float64, generator=g)
    b = torch.randn(6, dtype=torch.float64, generator=g)
    w = torch.rand(6, dtype=torch.float64, generator=g) + 0.1
    s1 = float(correlation_score(a, b, w))
    s2 = float(correlation_score(a * scale, b * scale, w))
    assert s1 == pytest.approx(s2, abs=1e-9)


def test_score_matrix_matches_pairwise():
    h = _rand_states(5, 4, 0)
    w = torch.rand(4, dtype=torch.float64) + 0.5
    m = score_matrix(h, w)
    for i in range(5):
        for j in range(5):
            assert float(m[i, j]) == pytest.approx(
                float(correlation_score(h[i], h[j], w)), abs=1e-12
            )


# ---------------------------------------------------------------------------
# affinity/penalty pair


def test_identical_states_all_affinity():
    h = torch.ones(4, 3, dtype=torch.float64) * 2.0
    w = torch.ones(3, dtype=torch.float64)
    affinity, penalty = build_pair(h, w)
    expected = torch.ones(4, 4, dtype=torch.float64) - torch.eye(4, dtype=torch.float64)
    torch.testing.assert_close(affinity, expected, rtol=0, atol=1e-12)
    torch.testing.assert_close(penalty, torch.zeros(4, 4, dtype=torch.float64), rtol=0, atol=0)


def test_antipodal_clusters_block_structure():
    v = torch.tensor([1.0, 0.5], dtype=torch.float64)
    h = torch.stack([v, 2 * v, -v, -3 * v])
    w = torch.ones(2, dtype=torch.float64)
    affinity, penalty = build_pair(h, w)
    within = [(0, 1), (1, 0), (2, 3), (3, 2)]
    across = [(0, 2), (0, 3), (1, 2), (1, 3), (2, 0), (2, 1), (3, 0), (3, 1)]
    for i, j in within:
        assert float(affinity[i, j]) == pytest.approx(1.0, abs=1e-12)
        assert float(penalty[i, j]) == 0.0
    for i, j in across:
        assert float(penalty[i, j]) == pytest.approx(1.0, abs=1e-12)
        assert float(affinity[i, j]) == 0.0


def test_pair_algebra_random():
    for seed in range(50):
        h = _rand_states(8, 5, seed)
        w = torch.rand(5, dtype=torch.float64) + 0.1
        affinity, penalty = build_pair(h, w)
        assert float((affinity * penalty).abs().max()) == 0.0  # disjoint supports
        assert float(affinity.min()) >= 0 and float(penalty.min()) >= 0
        assert float(affinity.max()) <= 1.0 and float(penalty.max()) <= 1.0
        assert float(affinity.diagonal().abs().max()) == 0.0
        assert float(penalty.diagonal().abs().max()) == 0.0
        torch.testing.assert_close(affinity, affinity.T, rtol=0, atol=1e-9)
        torch.testing.assert_close(penalty, penalty.T, rtol=0, atol=1e-9)


def test_top_k_keeps_largest_magnitude():
    h = _rand_states(6, 4, 11)
    w = torch.ones(4, dtype=torch.float64)
    affinity, penalty = build_pair(h, w, top_k=2)
    combined = affinity + penalty
    assert int((combined != 0).sum(dim=-1).max()) <= 2


# ---------------------------------------------------------------------------
# posterior update


def test_empty_pair_is_plain_normalization():
    h = _rand_states(5, 3, 1)
    zero = torch.zeros(5, 5, dtype=torch.float64)
    u = posterior_update(h, zero, zero)
    torch.testing.assert_close(u, h / h.norm(dim=-1, keepdim=True), rtol=0, atol=1e-12)


def test_unit_norms():
    for seed in range(20):
        h = _rand_states(10, 6, seed)
        w = torch.rand(6, dtype=torch.float64) + 0.1
        u = posterior_update(h, *build_pair(h, w))
        norms = u.norm(dim=-1)
        torch.testing.assert_close(norms, torch.ones_like(norms), rtol=0, atol=1e-9)


def _loop_oracle(h, affinity, penalty):
    n, d = h.shape
    out = torch.empty_like(h)
    for i in range(n):
        raw = h[i].clone()
        for j in range(n):
            raw = raw + affinity[i, j] * h[j] - penalty[i, j] * h[j]
        out[i] = raw / raw.norm()
    return out


def test_matches_loop_oracle():
    h = _rand_states(3, 4, 7)
    affinity = torch.tensor(
        [[0.0, 0.8, 0.0], [0.8, 0.0, 0.0], [0.0, 0.0, 0.0]], dtype=torch.float64
    )
    penalty = torch.tensor(
        [[0.0, 0.0, 0.6], [0.0, 0.0, 0.0], [0.6, 0.0, 0.0]], dtype=torch.float64
    )
    u = posterior_update(h, affinity, penalty)
    torch.testing.assert_close(u, _loop_oracle(h, affinity, penalty), rtol=0, atol=1e-10)


def test_matches_projected_gradient_oracle():
    """The correlation objective restricted to the unit sphere is linear in
    each u_i, so projected gradient descent from the normalized prior must
    land on the closed-form update (up to direction tolerance 1e-3)."""
    h = _rand_states(4, 5, 13)
    w = torch.rand(5, dtype=torch.float64) + 0.2
    affinity, penalty = build_pair(h, w)
    u_closed = posterior_update(h, affinity, penalty)

    u = (h / h.norm(dim=-1, keepdim=True)).clone().requires_grad_(True)
    opt = torch.optim.SGD([u], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        loss = correlation_loss(u, h, affinity, penalty, beta=1.0)
        loss.backward()
        opt.step()
        with torch.no_grad():
            u /= u.norm(dim=-1, keepdim=True)
    direction_gap = (u.detach() - u_closed).norm(dim=-1).max()
    assert float(direction_gap) < 1e-3


def test_degenerate_falls_back_to_prior():
    # u_0's raw update cancels exactly: penalty pulls away its own direction
    h = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    affinity = torch.zeros(2, 2, dtype=torch.float64)
    penalty = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
    u = posterior_update(h, affinity, penalty)
    torch.testing.assert_close(u[0], torch.tensor([1.0, 0.0], dtype=torch.float64), rtol=0, atol=1e-12)
    assert float(u[1].norm()) == pytest.approx(1.0, abs=1e-12)


def test_fully_degenerate_raises():
    h = torch.zeros(2, 3, dtype=torch.float64)
    zero = torch.zeros(2, 2, dtype=torch.float64)
    with pytest.raises(NumericError):
        posterior_update(h, zero, zero)
    with pytest.raises(NumericError):
        normalize_states(h)


# ---------------------------------------------------------------------------
# correlation loss


def test_loss_zero_when_u_equals_h():
    h = _rand_states(4, 3, 2)
    zero = torch.zeros(4, 4, dtype=torch.float64)
    assert float(correlation_loss(h, h, zero, zero, beta=1.0)) == pytest.approx(0.0, abs=1e-12)


def test_loss_single_affinity_term():
    h = _rand_states(3, 4, 5)
    u = _rand_states(3, 4, 6)
    affinity = torch.zeros(3, 3, dtype=torch.float64)
    affinity[0, 1] = 1.0
    penalty = torch.zeros(3, 3, dtype=torch.float64)
    loss = correlation_loss(u, h, affinity, penalty, beta=0.0)
    expected = float(((u[0] - h[1]) ** 2).sum())
    assert float(loss) == pytest.approx(expected, abs=1e-12)


def test_closed_form_improves_loss():
    wins = 0
    for seed in range(100):
        h = _rand_states(6, 4, seed)
        w = torch.rand(4, dtype=torch.float64) + 0.1
        affinity, penalty = build_pair(h, w)
        u_star = posterior_update(h, affinity, penalty)
        baseline = h / h.norm(dim=-1, keepdim=True)
        if float(correlation_loss(u_star, h, affinity, penalty)) <= float(
            correlation_loss(baseline, h, affinity, penalty)
        ) + 1e-12:
            wins += 1
    assert wins >= 95


# ---------------------------------------------------------------------------
# gradients through the full posterior stage


def test_gradient_through_pair_and_update():
    torch.manual_seed(3)
    d, n = 8, 12  # N=3, r=4 flattened
    for attempt in range(20):
        h0 = torch.randn(n, d, dtype=torch.float64)
        w0 = torch.rand(d, dtype=torch.float64) + 0.5
        scores = score_matrix(h0, w0).masked_fill(torch.eye(n, dtype=torch.bool), 1.0)
        if float(scores.abs().min()) > 1e-3:  # stay away from the relu kinks
            break
    else:
        pytest.skip("no well-separated instance found")

    h = h0.clone().requires_grad_(True)
    w = w0.clone().requires_grad_(True)

    def forward(h_, w_):
        affinity, penalty = build_pair(h_, w_)
        u = posterior_update(h_, affinity, penalty)
        return (u * torch.sin(torch.arange(d, dtype=torch.float64))).sum()

    loss = forward(h, w)
    loss.backward()
    step = 1e-6
    for tensor, grad in ((h0, h.grad), (w0, w.grad)):
        flat = tensor.view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 7)):
            orig = float(flat[idx])
            flat[idx] = orig + step
            up = float(forward(h0, w0))
            flat[idx] = orig - step
            down = float(forward(h0, w0))
            flat[idx] = orig
            fd = (up - down) / (2 * step)
            an = float(grad.view(-1)[idx])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            assert rel < 1e-4, f"idx {idx}: fd={fd} an={an}"
