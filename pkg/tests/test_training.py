import dataclasses
import json

import numpy as np
import pytest
import torch

from cool.checkpoint import (
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from cool.data import SyntheticSpec, generate_synthetic, prepare_datasets, stack_samples
from cool.errors import DataError, NumericError
from cool.model import build_model
from cool.training import mae_loss, train

from conftest import tiny_config


# ---------------------------------------------------------------------------
# loss


def _t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_mae_loss_zero_when_exact():
    y = _t([1.0, 2.0])
    assert float(mae_loss(y, y, torch.ones(2, dtype=torch.bool))) == 0.0


def test_mae_loss_hand_example():
    loss = mae_loss(_t([2.0, 2.0]), _t([1.0, 3.0]), torch.ones(2, dtype=torch.bool))
    assert float(loss) == pytest.approx(1.0, abs=1e-12)


def test_mae_loss_masked_entry_excluded():
    loss = mae_loss(
        _t([2.0, 0.0]), _t([1.0, 9.0]), torch.tensor([True, False])
    )
    assert float(loss) == pytest.approx(1.0, abs=1e-12)


def test_mae_loss_empty_mask_rejected():
    with pytest.raises(DataError):
        mae_loss(_t([1.0]), _t([1.0]), torch.tensor([False]))


# ---------------------------------------------------------------------------
# training loop


@pytest.fixture(scope="module")
def four_node_datasets():
    spec = SyntheticSpec(lag_pairs=((0, 1, 4),), extra_edges=2)
    series, graph = generate_synthetic(4, 1, spec, seed=9)
    cfg = tiny_config()
    return prepare_datasets(
        graph, series, t_in=cfg.input_steps, t_out=cfg.output_steps,
        ratios=cfg.split, train_stride=1, eval_stride=None,
    )


def test_smoke_two_epochs(four_node_datasets, tmp_path):
    cfg = tiny_config(epochs=2)
    result = train(cfg, four_node_datasets, out_dir=tmp_path)
    assert result.payload["epoch"] == 2
    for record in result.log:
        assert np.isfinite(record["train_mae"])
        assert np.isfinite(record["val_mae"])
    log_lines = (tmp_path / "epochs.jsonl").read_text().splitlines()
    assert len(log_lines) == 2
    parsed = json.loads(log_lines[0])
    assert set(parsed) == {
        "epoch", "train_mae", "val_mae", "val_rmse", "val_mape", "wall_seconds"
    }


def test_identical_loss_curves_same_seed(four_node_datasets):
    cfg = tiny_config(epochs=2)
    r1 = train(cfg, four_node_datasets)
    r2 = train(cfg, four_node_datasets)
    for a, b in zip(r1.log, r2.log):
        assert a["train_mae"] == b["train_mae"]
        assert a["val_mae"] == b["val_mae"]


def test_checkpoint_round_trip_exact(four_node_datasets, tmp_path):
    cfg = tiny_config(epochs=1)
    result = train(cfg, four_node_datasets, out_dir=tmp_path)
    x, _, _ = stack_samples(four_node_datasets.val[:2])
    x = torch.from_numpy(x)

    model = model_from_checkpoint(result.payload, which="best")
    with torch.no_grad():
        before = model(x).numpy()

    payload = load_checkpoint(tmp_path / "checkpoint.ckpt")
    model2 = model_from_checkpoint(payload, which="best")
    with torch.no_grad():
        after = model2(x).numpy()
    np.testing.assert_array_equal(before, after)


def test_resume_continues_epoch_counter(four_node_datasets, tmp_path):
    cfg = tiny_config(epochs=2)
    train(cfg, four_node_datasets, out_dir=tmp_path)
    cfg4 = tiny_config(epochs=4)
    result = train(
        cfg4, four_node_datasets, out_dir=tmp_path,
        resume_from=tmp_path / "checkpoint.ckpt",
    )
    assert result.payload["epoch"] == 4
    assert [r["epoch"] for r in result.log] == [1, 2, 3, 4]


def test_resume_matches_uninterrupted_run(four_node_datasets, tmp_path):
    """Split training must land on the same parameters as one straight run:
    optimizer state and both RNG streams are restored exactly."""
    straight = train(tiny_config(epochs=4), four_node_datasets)

    part = tmp_path / "part"
    train(tiny_config(epochs=2), four_node_datasets, out_dir=part)
    resumed = train(
        tiny_config(epochs=4), four_node_datasets, out_dir=part,
        resume_from=part / "checkpoint.ckpt",
    )
    for name, arr in straight.payload["last_params"].items():
        np.testing.assert_array_equal(arr, resumed.payload["last_params"][name])
    assert [r["train_mae"] for r in straight.log] == [
        r["train_mae"] for r in resumed.log
    ]


def test_resume_config_mismatch_rejected(four_node_datasets, tmp_path):
    train(tiny_config(epochs=1), four_node_datasets, out_dir=tmp_path)
    with pytest.raises(DataError, match="config"):
        train(
            tiny_config(epochs=2, d=16), four_node_datasets,
            out_dir=tmp_path, resume_from=tmp_path / "checkpoint.ckpt",
        )


def test_best_checkpoint_retained(four_node_datasets):
    result = train(tiny_config(epochs=3), four_node_datasets)
    maes = [r["val_mae"] for r in result.log]
    assert result.payload["best_val_mae"] == pytest.approx(min(maes))
    assert result.payload["best_epoch"] == maes.index(min(maes)) + 1


def test_non_finite_loss_aborts_with_diagnostics(four_node_datasets, monkeypatch):
    import cool.training as training_mod

    def bad_loss(predicted, target, mask):
        return torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True)

    monkeypatch.setattr(training_mod, "mae_loss", bad_loss)
    with pytest.raises(NumericError, match="epoch 1"):
        train(tiny_config(epochs=1), four_node_datasets)


def test_early_stopping(four_node_datasets):
    # lr 0 never improves validation, so patience 1 stops after epoch 2
    cfg = dataclasses.replace(
        tiny_config(epochs=10), learning_rate=1e-30, early_stop_patience=1
    )
    result = train(cfg, four_node_datasets)
    assert result.payload["epoch"] < 10


def test_checkpoint_rejects_non_finite_params(four_node_datasets, tmp_path):
    result = train(tiny_config(epochs=1), four_node_datasets)
    payload = dict(result.payload)
    payload["best_params"] = dict(payload["best_params"])
    name = next(iter(payload["best_params"]))
    bad = payload["best_params"][name].copy()
    bad.flat[0] = np.inf
    payload["best_params"][name] = bad
    with pytest.raises(DataError):
        save_checkpoint(payload, tmp_path / "bad.ckpt")


def test_checkpoint_magic_rejected(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(DataError):
        load_checkpoint(p)


def test_grad_clip_bounds_update(four_node_datasets):
    # a tiny clip norm caps the first step; parameters stay near init
    cfg_small = dataclasses.replace(tiny_config(epochs=1), grad_clip=1e-9)
    cfg_none = dataclasses.replace(tiny_config(epochs=1), grad_clip=None)
    r_small = train(cfg_small, four_node_datasets)
    r_none = train(cfg_none, four_node_datasets)
    init = build_model(tiny_config(), four_node_datasets.graph, 1)
    init_params = {k: v.detach().numpy().copy() for k, v in init.named_parameters()}
    drift_small = sum(
        np.abs(r_small.payload["last_params"][k] - init_params[k]).sum()
        for k in init_params
    )
    drift_none = sum(
        np.abs(r_none.payload["last_params"][k] - init_params[k]).sum()
        for k in init_params
    )
    assert drift_small < drift_none
