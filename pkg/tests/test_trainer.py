import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from eegtext.classifier import ClassifierConfig
from eegtext.container import ChecksumError
from eegtext.dsp import EpochTensor
from eegtext.encoder import EncoderConfig
from eegtext.model import Model
from eegtext.trainer import (AdamState, EarlyStopping, EpochMetrics, LabelMismatch, MetricsLog,
                             TrainConfig, TrainingDiverged, adam_step, batch_rng, batch_slices,
                             epoch_order, evaluate, evaluate_loss, fit, load_checkpoint, lr_at,
                             save_checkpoint, subsample_epochs, sweep_data_efficiency)

T = 32
TINY = EncoderConfig(block_filters=[2, 2, 2], kernel_time=4, lstm_units=3, sep_kernel=3,
                     sep_filters=4)


def toy_data(n_per_class=8, n_classes=2, seed=0, t=T):
    r = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    tt = np.arange(t) / 128.0
    waves = np.sin(2 * np.pi * (6 + 10 * labels)[:, None] * tt)
    x = waves[:, None, :, None] + 0.3 * r.standard_normal((len(labels), 5, t, 1))
    return EpochTensor(x, labels, class_names=[f"class_{i}" for i in range(n_classes)])


def tiny_model(n_classes=2, seed=0, dtype=np.float64):
    return Model.init(TINY, ClassifierConfig(hidden=[6, 4], n_classes=n_classes), seed, dtype,
                      timesteps=T)


# ----------------------------------------------------------------------
# optimizer pieces

def test_adam_first_step_moves_by_lr_times_sign():
    cfg = TrainConfig()
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 1e-3])}
    new, st_ = adam_step(p, g, AdamState.zeros_like(p), 0.01, cfg)
    # with bias correction the first step is lr * g / (|g| + eps)
    expect = p["w"] - 0.01 * g["w"] / (np.abs(g["w"]) + 1e-7)
    np.testing.assert_allclose(new["w"], expect, rtol=1e-12)
    assert st_.t == 1
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])  # input untouched


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, 2.0])}
    new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), 0.1, TrainConfig())
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_minimizes_a_quadratic():
    cfg = TrainConfig(lr=0.1)
    p = {"w": np.array([3.0, -2.0, 0.5])}
    s = AdamState.zeros_like(p)
    for _ in range(500):
        p, s = adam_step(p, {"w": 2 * p["w"]}, s, 0.1, cfg)
    assert np.abs(p["w"]).max() < 1e-2


def test_adam_rejects_shape_mismatch():
    p = {"w": np.zeros(3)}
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), 0.1, TrainConfig())


def test_learning_rate_schedule():
    cfg = TrainConfig(lr=0.001, decay_rate=0.95)
    assert lr_at(0, cfg) == 0.001
    assert lr_at(10, cfg) == pytest.approx(0.001 * 0.95 ** 10, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_early_stopping_on_a_plateau():
    es = EarlyStopping(15)
    values = [1.0, 0.8, 0.6, 0.5, 0.4, 0.3] + [0.3] * 30
    stopped = next(e for e, v in enumerate(values) if es.update(e, v))
    assert stopped == 20 and es.best_epoch == 5


def test_early_stopping_requires_strict_improvement():
    es = EarlyStopping(2)
    assert not es.update(0, 1.0)
    assert not es.update(1, 1.0)
    assert es.update(2, 1.0)


@given(st.integers(1, 200), st.integers(2, 64))
def test_batches_cover_everything_once_and_never_hold_one_sample(n, bs):
    sl = batch_slices(n, bs)
    covered = np.concatenate([np.arange(n)[s] for s in sl])
    np.testing.assert_array_equal(covered, np.arange(n))
    if n > 1:
        assert min(s.stop - s.start for s in sl) >= 2


def test_config_validation():
    for bad in ({"lr": 0}, {"beta1": 1.0}, {"patience": 0}, {"batch_size": 0},
                {"decay_rate": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_metrics_log_validates_and_roundtrips(tmp_path):
    log = MetricsLog()
    log.append(EpochMetrics(0, 0.7, 0.5, 0.69, 0.5, 0.001))
    log.append(EpochMetrics(1, 1 / 3, 0.75, 0.6, 0.625, 0.00095))
    with pytest.raises(ValueError):
        log.append(EpochMetrics(1, 0.1, 0.5, 0.1, 0.5, 0.001))
    with pytest.raises(ValueError):
        log.append(EpochMetrics(2, 0.1, 1.5, 0.1, 0.5, 0.001))
    log.write(tmp_path / "m.csv")
    back = MetricsLog.read(tmp_path / "m.csv")
    assert back.rows == log.rows
    assert back.to_csv() == log.to_csv()


# ----------------------------------------------------------------------
# the training loop

@pytest.fixture(scope="module")
def trained():
    train, val = toy_data(seed=0), toy_data(n_per_class=4, seed=1)
    cfg = TrainConfig(lr=0.01, epochs=6, batch_size=5, seed=7, patience=50)
    best, log = fit(train, val, tiny_model(), cfg)
    return train, val, cfg, best, log


def test_fit_is_bitwise_deterministic(trained):
    train, val, cfg, best, log = trained
    best2, log2 = fit(train, val, tiny_model(), cfg)
    assert log2.to_csv() == log.to_csv()
    for k in best.model.params:
        np.testing.assert_array_equal(best.model.params[k], best2.model.params[k])


def test_best_checkpoint_has_lowest_validation_loss(trained):
    train, val, cfg, best, log = trained
    assert best.best_val_loss == min(r.val_loss for r in log.rows)
    assert log.rows[best.epoch].val_loss == best.best_val_loss
    # the logged value is exactly what an offline evaluation of the snapshot gives
    assert evaluate_loss(best.model, val)[0] == best.best_val_loss


def test_logged_train_loss_matches_offline_replay(trained):
    train, val, cfg, best, log = trained
    model = tiny_model()
    params = {k: v.copy() for k, v in model.params.items()}
    trainable = model.trainable_names()
    state = AdamState.zeros_like({k: params[k] for k in trainable})
    order = epoch_order(cfg.seed, 0, len(train))
    from eegtext.classifier import maxnorm_project
    from eegtext.tensor import backward
    total_loss = 0.0
    for b, sl in enumerate(batch_slices(len(train), cfg.batch_size)):
        cur = Model(model.encoder, model.classifier, params, model.class_names, T)
        idx = order[sl]
        tensors = cur.leaves()
        total, _, _, updates = cur.loss(train.data[idx], train.labels[idx], tensors, "train",
                                        batch_rng(cfg.seed, 0, b))
        backward(total)
        stepped, state = adam_step({k: params[k] for k in trainable},
                                   {k: tensors[k].grad for k in trainable}, state, cfg.lr, cfg)
        params = {**params, **stepped}
        for k in cur.dense_names():
            params[k] = maxnorm_project(params[k], model.classifier.maxnorm_c)
        params.update(updates)
        total_loss += total.item() * len(idx)
    assert math.isclose(total_loss / len(train), log.rows[0].train_loss, rel_tol=1e-12)


def test_max_norm_holds_after_training(trained):
    _, _, _, best, _ = trained
    for k in best.model.dense_names():
        assert np.linalg.norm(best.model.params[k], axis=0).max() <= best.model.classifier.maxnorm_c + 1e-9


def test_learning_rate_column_follows_schedule(trained):
    _, _, cfg, _, log = trained
    for r in log.rows:
        assert r.lr == lr_at(r.epoch, cfg)


def test_checkpoint_roundtrip_is_bitwise(trained, tmp_path):
    _, val, _, best, _ = trained
    save_checkpoint(best, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    for k in best.model.params:
        np.testing.assert_array_equal(back.model.params[k], best.model.params[k])
    for k in best.adam.m:
        np.testing.assert_array_equal(back.adam.m[k], best.adam.m[k])
    assert back.adam.t == best.adam.t and back.epoch == best.epoch
    np.testing.assert_array_equal(back.model.predict_proba(val.data),
                                  best.model.predict_proba(val.data))


def test_corrupt_checkpoint_is_detected(trained, tmp_path):
    _, _, _, best, _ = trained
    p = tmp_path / "c.ckpt"
    save_checkpoint(best, p)
    blob = bytearray(p.read_bytes())
    blob[len(blob) // 2] ^= 0x10
    p.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_checkpoint(p)


def test_evaluate_confusion_matrix(trained):
    _, val, _, best, _ = trained
    rep = evaluate(best, val)
    assert rep.confusion.sum() == len(val)
    np.testing.assert_array_equal(rep.confusion.sum(axis=1), np.bincount(val.labels))
    assert rep.accuracy == pytest.approx(np.trace(rep.confusion) / len(val))
    assert rep.class_names == ["class_0", "class_1"]


def test_label_mismatch_is_rejected():
    data = toy_data(n_classes=3, n_per_class=3)
    with pytest.raises(LabelMismatch):
        evaluate(tiny_model(2), data)
    renamed = EpochTensor(data.data, data.labels % 2, class_names=["x", "y"])
    with pytest.raises(LabelMismatch):
        evaluate(tiny_model(2), renamed)


def test_untrained_model_is_near_chance():
    data = toy_data(n_per_class=100, n_classes=2, seed=3)
    acc = evaluate(tiny_model(seed=5), data).accuracy
    n = len(data)
    # accuracy of a fixed random function stays inside a generous binomial band
    lo, hi = stats.binom.ppf([1e-6, 1 - 1e-6], n, 0.5) / n
    assert 0.0 <= acc <= 1.0
    assert lo - 0.5 <= acc <= hi + 0.5  # sanity only; a random net may latch onto one class


def test_divergence_reports_epoch_and_batch():
    train = toy_data()
    big = EpochTensor(train.data * 1e300, train.labels, class_names=train.class_names)
    with pytest.raises(TrainingDiverged) as err:
        fit(big, toy_data(n_per_class=2), tiny_model(), TrainConfig(epochs=1, batch_size=4))
    assert err.value.epoch == 0 and err.value.batch == 0


def test_fit_rejects_oversized_batch():
    with pytest.raises(ValueError):
        fit(toy_data(n_per_class=2), toy_data(n_per_class=2), tiny_model(),
            TrainConfig(batch_size=32))


def test_subsample_and_sweep():
    data = toy_data(n_per_class=10)
    split = np.array((["train"] * 7 + ["val"] * 3) * 2)
    data = EpochTensor(data.data, data.labels, class_names=data.class_names, split=split)
    small = subsample_epochs(data, 3, seed=1)
    assert np.bincount(small.labels).tolist() == [3, 3]
    rows = sweep_data_efficiency(data, [2, 5], lambda: tiny_model(),
                                 TrainConfig(epochs=2, batch_size=4, lr=0.01))
    assert [r.samples_per_class for r in rows] == [2, 5]
    assert all(0 <= r.accuracy <= 1 for r in rows)
    with pytest.raises(ValueError, match="infeasible"):
        sweep_data_efficiency(data, [8], lambda: tiny_model(), TrainConfig(epochs=1))
