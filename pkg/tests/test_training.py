import json
import math

import numpy as np
import pytest

from lantern.data_model import HeaderError, PayloadError
from lantern.network import default_params, forward
from lantern.phantom import MaskSpec, PhantomConfig, build_dataset
from lantern.training import (
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_history,
)


def _tiny_dataset(n=3, seed=0):
    return build_dataset(
        n, PhantomConfig(nx=8, ny=8, nt=4, n_ellipses=3), MaskSpec("1drandom", 2.0, 2), seed=seed
    )


def _tiny_params():
    return default_params(8, 8, 4, n_stages=2, plf_points=5)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-0.1)


def test_zero_learning_rate_is_a_no_op():
    ds = _tiny_dataset()
    init = _tiny_params()
    cfg = TrainConfig(learning_rate=0.0, epochs=3, seed=1, validation_fraction=0.0)
    params, report = train(ds, init, cfg)
    assert np.array_equal(params.pack(), init.pack())
    assert report.train_loss[0] == report.train_loss[-1]
    assert len(report.train_loss) == len(report.val_loss) == 3


def test_training_is_bit_deterministic():
    ds = _tiny_dataset(seed=2)
    cfg = TrainConfig(learning_rate=0.01, epochs=3, optimizer="gd", seed=3)
    p1, r1 = train(ds, _tiny_params(), cfg)
    p2, r2 = train(ds, _tiny_params(), cfg)
    assert np.array_equal(p1.pack(), p2.pack())
    assert r1.train_loss == r2.train_loss


def test_training_reduces_loss_on_small_experiment():
    # 10 phantoms, 16x16x4, fourfold 1D-random undersampling, 4 stages,
    # 50 epochs at learning rate 0.01: at least half the loss disappears
    ds = build_dataset(
        10, PhantomConfig(nx=16, ny=16, nt=4), MaskSpec("1drandom", 4.0, 2), 0.0, seed=12
    )
    init = default_params(16, 16, 4, n_stages=4)
    cfg = TrainConfig(learning_rate=0.01, epochs=50, optimizer="gd", seed=2)
    params, report = train(ds, init, cfg)
    assert report.train_loss[-1] < 0.5 * report.train_loss[0]
    assert all(st.rho > 0 for st in params.stages)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_rho_stays_positive_under_aggressive_steps():
    ds = _tiny_dataset(seed=4)
    cfg = TrainConfig(learning_rate=5.0, epochs=2, optimizer="gd", seed=5, grad_clip=1e3)
    try:
        params, _ = train(ds, _tiny_params(), cfg)
    except TrainingDiverged:
        return  # divergence is acceptable here; positivity is what matters below
    assert all(st.rho > 0 for st in params.stages)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_sample():
    ds = _tiny_dataset(seed=6)
    cfg = TrainConfig(learning_rate=1e9, epochs=4, optimizer="gd", seed=7)
    with pytest.raises(TrainingDiverged) as err:
        train(ds, _tiny_params(), cfg)
    assert err.value.epoch >= 0
    assert err.value.sample >= 0


def test_empty_dataset_rejected():
    from lantern.data_model import Dataset

    with pytest.raises(ValueError):
        train(Dataset([]), _tiny_params(), TrainConfig(epochs=1))


def test_adam_differs_from_gd():
    ds = _tiny_dataset(seed=8)
    cfg_gd = TrainConfig(learning_rate=0.01, epochs=2, optimizer="gd", seed=9)
    cfg_adam = TrainConfig(learning_rate=0.01, epochs=2, optimizer="adam", seed=9)
    p_gd, _ = train(ds, _tiny_params(), cfg_gd)
    p_adam, _ = train(ds, _tiny_params(), cfg_adam)
    assert not np.array_equal(p_gd.pack(), p_adam.pack())


# --- checkpoints ---------------------------------------------------------------


def _trained(tmp_path):
    ds = _tiny_dataset(seed=10)
    cfg = TrainConfig(learning_rate=0.01, epochs=2, optimizer="gd", seed=11)
    params, report = train(ds, _tiny_params(), cfg)
    path = tmp_path / "model.lckpt"
    save_checkpoint(path, params, cfg, report)
    return ds, params, cfg, report, path


def test_checkpoint_round_trip(tmp_path):
    ds, params, cfg, report, path = _trained(tmp_path)
    loaded, cfg2, report2 = load_checkpoint(path)
    assert np.array_equal(loaded.pack(), params.pack())
    assert cfg2 == cfg
    assert report2.train_loss == report.train_loss
    np.testing.assert_array_equal(report2.val_loss, report.val_loss)


def test_checkpoint_forward_bit_identical(tmp_path):
    ds, params, cfg, report, path = _trained(tmp_path)
    loaded, _, _ = load_checkpoint(path)
    y, mask, _ = ds[0]
    a, _ = forward(y, mask, params)
    b, _ = forward(y, mask, loaded)
    assert np.array_equal(a.data, b.data)


def test_checkpoint_truncation_detected(tmp_path):
    _, _, _, _, path = _trained(tmp_path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(PayloadError):
        load_checkpoint(path)


def test_checkpoint_version_mismatch_detected(tmp_path):
    _, _, _, _, path = _trained(tmp_path)
    blob = path.read_bytes()
    newline = blob.find(b"\n")
    manifest = json.loads(blob[:newline])
    manifest["version"] = 99
    path.write_bytes(json.dumps(manifest).encode() + blob[newline:])
    with pytest.raises(HeaderError):
        load_checkpoint(path)


def test_loss_history_csv_round_trip(tmp_path):
    _, _, _, report, _ = _trained(tmp_path)
    path = tmp_path / "loss.csv"
    write_loss_history(path, report)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert len(lines) == 1 + len(report.train_loss)
    for i, line in enumerate(lines[1:]):
        epoch, tr, va = line.split(",")
        assert int(epoch) == i
        assert float(tr) == report.train_loss[i]
        assert float(va) == report.val_loss[i] or (
            math.isnan(float(va)) and math.isnan(report.val_loss[i])
        )
