import numpy as np
import pytest
import torch

from cool.data import stack_samples
from cool.errors import ConfigError, DataError
from cool.model import build_model, predict_samples

from conftest import tiny_config


def _input(datasets, n=2):
    x, _, _ = stack_samples(datasets.train[:n])
    return torch.from_numpy(x)


def test_forward_shape(small_datasets):
    cfg = tiny_config()
    model = build_model(cfg, small_datasets.graph, 1)
    x = _input(small_datasets, 3)
    with torch.no_grad():
        y = model(x)
    assert y.shape == (3, cfg.output_steps, small_datasets.graph.n_nodes, 1)
    assert y.dtype == torch.float64


def test_forward_deterministic(small_datasets):
    cfg = tiny_config()
    x = _input(small_datasets)
    outs = []
    for _ in range(2):
        model = build_model(cfg, small_datasets.graph, 1)
        with torch.no_grad():
            outs.append(model(x).numpy())
    np.testing.assert_array_equal(outs[0], outs[1])


def test_seed_changes_parameters(small_datasets):
    m0 = build_model(tiny_config(seed=0), small_datasets.graph, 1)
    m1 = build_model(tiny_config(seed=1), small_datasets.graph, 1)
    same = all(
        torch.equal(a, b) for a, b in zip(m0.parameters(), m1.parameters())
    )
    assert not same


def test_bad_input_shape_rejected(small_datasets):
    model = build_model(tiny_config(), small_datasets.graph, 1)
    with pytest.raises(DataError):
        model(torch.zeros(1, 5, small_datasets.graph.n_nodes, 1, dtype=torch.float64))


def test_all_branches_ablated_rejected():
    with pytest.raises(ConfigError, match="fusion"):
        tiny_config(use_multi_rank=False, use_multi_scale=False)


@pytest.mark.parametrize(
    "flag,param_prefixes",
    [
        ("use_prior", ("prior.",)),
        ("use_posterior", ("scoring_w",)),
        ("use_multi_rank", ("rank_branches.", "fusion.rank_logits")),
        ("use_multi_scale", ("scale_branches.", "fusion.scale_logits")),
    ],
)
def test_ablation_removes_exactly_one_group(small_datasets, flag, param_prefixes):
    full = build_model(tiny_config(), small_datasets.graph, 1)
    ablated = build_model(tiny_config(**{flag: False}), small_datasets.graph, 1)
    full_names = {name for name, _ in full.named_parameters()}
    ablated_names = {name for name, _ in ablated.named_parameters()}
    removed = full_names - ablated_names
    assert ablated_names <= full_names
    assert removed == {
        n for n in full_names if any(n.startswith(p) for p in param_prefixes)
    }
    assert removed  # the group actually existed in the full model


def test_forward_detailed_contents(small_datasets):
    cfg = tiny_config()
    model = build_model(cfg, small_datasets.graph, 1)
    x = _input(small_datasets, 1)
    with torch.no_grad():
        out = model.forward_detailed(x)
    assert set(out) == {"prediction", "prior", "posterior", "pair", "attention"}
    rn = cfg.input_steps * small_datasets.graph.n_nodes
    assert out["prior"].shape == (1, rn, cfg.d)
    assert out["posterior"].shape == (1, rn, cfg.d)
    norms = out["posterior"].norm(dim=-1)
    torch.testing.assert_close(norms, torch.ones_like(norms), rtol=0, atol=1e-9)
    affinity, penalty = out["pair"]
    assert float((affinity * penalty).abs().max()) == 0.0
    torch.testing.assert_close(affinity[0], affinity[0].T, rtol=0, atol=1e-9)
    assert set(out["attention"]) == {"rank3", "scale4"}
    for scores in out["attention"].values():
        sums = scores.sum(dim=-1)
        torch.testing.assert_close(sums, torch.ones_like(sums), rtol=0, atol=1e-9)


def test_posterior_ablation_states_unit_norm(small_datasets):
    cfg = tiny_config(use_posterior=False)
    model = build_model(cfg, small_datasets.graph, 1)
    with torch.no_grad():
        out = model.forward_detailed(_input(small_datasets, 1))
    assert out["pair"] is None
    norms = out["posterior"].norm(dim=-1)
    torch.testing.assert_close(norms, torch.ones_like(norms), rtol=0, atol=1e-9)


def test_prior_ablation_uses_projection(small_datasets):
    cfg = tiny_config(use_prior=False)
    model = build_model(cfg, small_datasets.graph, 1)
    x = _input(small_datasets, 1)
    with torch.no_grad():
        out = model.forward_detailed(x)
        b, t, n, f = x.shape
        expected = model.input_proj(x.reshape(b, t * n, f))
    torch.testing.assert_close(out["prior"], expected, rtol=0, atol=0)


def test_predict_samples_batch_invariance(small_datasets):
    model = build_model(tiny_config(), small_datasets.graph, 1)
    samples = small_datasets.val
    a = predict_samples(model, samples, batch_size=2)
    b = predict_samples(model, samples, batch_size=len(samples))
    np.testing.assert_allclose(a, b, atol=1e-12)
