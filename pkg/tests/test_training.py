import math

import numpy as np
import pytest

from rehashdiff.dataset import ToyDataset, generate_grid_patterns
from rehashdiff.denoiser import LinearSoftmaxDenoiser
from rehashdiff.schedule import LINEAR, NoiseSchedule
from rehashdiff.training import (CorruptedBatch, reference_loss, TrainConfig, TrainingDiverged, corrupt_batch,
                                 ddm_general_loss, ddm_linear_loss, grad_check, loss_weights,
                                 masked_cross_entropy, mvtm_loss, train)
from rehashdiff.vocab import ContractError, VocabSpec

SPEC = VocabSpec(2, 2)


def _biased(p_correct=0.8):
    """Length-2 denoiser predicting token 0 with probability p_correct everywhere."""
    den = LinearSoftmaxDenoiser.zeros(SPEC, 2)
    b = np.tile([math.log(p_correct), math.log(1 - p_correct)], (2, 1))
    return den.with_params(b=b)


def _batch(xt, t):
    return CorruptedBatch(np.array([[0, 0]]), np.array([xt]), np.array([t]), [None])


def test_one_masked_position_examples():
    den = _biased()
    batch = _batch([2, 0], 0.5)
    ddm = masked_cross_entropy(den, batch, loss_weights("ddm-linear", batch.t, LINEAR))
    mvtm = masked_cross_entropy(den, batch, loss_weights("mvtm", batch.t, LINEAR))
    assert ddm.loss == pytest.approx(2 * -math.log(0.8), rel=1e-14)
    assert round(ddm.loss, 4) == 0.4463
    assert mvtm.loss == pytest.approx(-math.log(0.8), rel=1e-14)
    assert round(mvtm.loss, 4) == 0.2231
    assert ddm.n_masked == 1
    assert ddm.loss / mvtm.loss == pytest.approx(1 / 0.5, rel=1e-14)


def test_no_masked_positions_give_zero():
    den = _biased()
    batch = _batch([0, 1], 0.3)
    for kind in ("ddm-linear", "mvtm"):
        rep = masked_cross_entropy(den, batch, loss_weights(kind, batch.t, LINEAR))
        assert rep.loss == 0.0 and rep.n_masked == 0
        assert all(not g.any() for g in rep.grads.values())


def test_uniform_denoiser_fully_masked_is_ln2():
    den = LinearSoftmaxDenoiser.zeros(VocabSpec(2, 1), 1)
    rep = ddm_linear_loss(den, np.array([[1]]), None, LINEAR, np.random.default_rng(0),
                          t=np.array([1.0]), drop_prob=0.0)
    assert rep.loss == pytest.approx(math.log(2), rel=1e-15)


def test_ddm_losses_agree_bit_for_bit():
    rng = np.random.default_rng(3)
    data = generate_grid_patterns(3, 2, classes=2, m=3)
    base = LinearSoftmaxDenoiser.zeros(data.spec, data.length, 2)
    den = base.with_params(**{k: 0.3 * rng.normal(size=v.shape) for k, v in base.params().items()})
    x0, labels = data.sequences, list(data.labels)
    a = ddm_linear_loss(den, x0, labels, LINEAR, np.random.default_rng(11))
    b = ddm_general_loss(den, x0, labels, LINEAR, np.random.default_rng(11))
    assert a.loss == b.loss
    for name in a.grads:
        np.testing.assert_array_equal(a.grads[name], b.grads[name])


def test_general_weight_examples():
    assert loss_weights("ddm-general", np.array([0.25]), LINEAR)[0] == 4.0
    for sched in (LINEAR, NoiseSchedule("cosine")):
        for t in (0.1, 0.5, 0.9):
            h = 1e-6
            fd = -(sched.alpha(t + h) - sched.alpha(t - h)) / (2 * h * (1 - sched.alpha(t)))
            assert sched.loss_weight(t) == pytest.approx(fd, abs=1e-6)


def test_ddm_linear_requires_linear_schedule():
    den = LinearSoftmaxDenoiser.zeros(SPEC, 2)
    with pytest.raises(ContractError):
        ddm_linear_loss(den, np.zeros((1, 2), dtype=int), None, NoiseSchedule("cosine"),
                        np.random.default_rng(0))


def test_corrupt_batch_respects_t_min_and_drop():
    rng = np.random.default_rng(0)
    x0 = np.zeros((5000, 3), dtype=np.int64)
    b = corrupt_batch(x0, [1] * 5000, LINEAR, rng, SPEC, t_min=0.2, drop_prob=0.1)
    assert b.t.min() >= 0.2 and b.t.max() <= 1.0
    dropped = sum(lab is None for lab in b.labels) / 5000
    assert abs(dropped - 0.1) < 0.015


def test_loss_nonnegative_and_grad_shapes():
    rng = np.random.default_rng(1)
    data = generate_grid_patterns(3, 3, classes=2, m=2)
    den = LinearSoftmaxDenoiser.zeros(data.spec, data.length, 2)
    for fn in (ddm_linear_loss, ddm_general_loss, mvtm_loss):
        rep = fn(den, data.sequences, list(data.labels), LINEAR, rng)
        assert rep.loss >= 0
        for name, g in rep.grads.items():
            assert g.shape == getattr(den, name).shape


@pytest.mark.parametrize("kind", ["ddm-linear", "mvtm", "ddm-general"])
def test_grad_check_zero_params(kind):
    data = generate_grid_patterns(2, 3, classes=2, m=2)
    den = LinearSoftmaxDenoiser.zeros(data.spec, data.length, 2)
    err = grad_check(den, data.sequences, list(data.labels), kind, LINEAR, np.random.default_rng(0))
    assert err < 1e-4


@pytest.mark.parametrize("kind", ["ddm-linear", "mvtm"])
def test_grad_check_random_params(kind):
    rng = np.random.default_rng(7)
    data = generate_grid_patterns(3, 2, classes=2, m=3)
    base = LinearSoftmaxDenoiser.zeros(data.spec, data.length, 2, time_channel=True)
    den = base.with_params(**{k: rng.normal(size=v.shape) for k, v in base.params().items()})
    assert grad_check(den, data.sequences, list(data.labels), kind, LINEAR, rng) < 1e-4


def test_grad_check_cosine_general():
    rng = np.random.default_rng(8)
    data = generate_grid_patterns(2, 2, classes=1, m=2)
    base = LinearSoftmaxDenoiser.zeros(data.spec, data.length, 1)
    den = base.with_params(**{k: rng.normal(size=v.shape) for k, v in base.params().items()})
    assert grad_check(den, data.sequences, list(data.labels), "ddm-general",
                      NoiseSchedule("cosine"), rng) < 1e-4


def _singleton():
    return ToyDataset(VocabSpec(2, 1), np.array([[0, 1]]), (None,), np.array([1.0]))


def test_train_zero_steps_returns_init():
    data = _singleton()
    res = train(TrainConfig(steps=0), data)
    assert all(not v.any() for v in res.denoiser.params().values())
    assert res.log == []


def test_train_singleton_converges():
    data = _singleton()
    res = train(TrainConfig(steps=500, batch_size=32, seed=0), data)
    p = res.denoiser.predict(np.array([2, 2]), 1.0)
    assert p[0, 0] > 0.99 and p[1, 1] > 0.99
    assert res.final_loss < 0.05
    assert res.best_loss <= res.final_loss


def test_train_is_deterministic(tmp_path):
    data = generate_grid_patterns(3, 2, classes=2, m=2)
    cfg = TrainConfig(steps=60, batch_size=16, seed=4, log_every=20)
    paths = []
    for k in range(2):
        res = train(cfg, data)
        paths.append(tmp_path / f"p{k}.bin")
        res.denoiser.save(paths[-1])
        assert [step for step, _, _ in res.log] == [20, 40, 60]
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_sgd_reduces_loss():
    data = generate_grid_patterns(3, 2, classes=1, m=2)
    res = train(TrainConfig(steps=300, optimizer="sgd", lr=0.5, seed=1, log_every=50), data)
    assert res.log[-1][1] < res.log[0][1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_is_reported():
    data = generate_grid_patterns(3, 2, classes=1, m=2)
    with pytest.raises(TrainingDiverged):
        train(TrainConfig(steps=50, optimizer="sgd", lr=1e308, seed=0), data)


@pytest.mark.parametrize("kwargs", [dict(t_min=0.0), dict(t_min=1.0), dict(drop_prob=1.5),
                                    dict(loss="l2"), dict(optimizer="rmsprop"), dict(batch_size=0)])
def test_train_config_validation(kwargs):
    with pytest.raises(ContractError):
        TrainConfig(**kwargs)


@pytest.mark.parametrize("dtype", [np.float64, np.longdouble])
def test_reference_loss_matches_model_loss(dtype):
    rng = np.random.default_rng(12)
    data = generate_grid_patterns(3, 2, classes=2, m=2)
    base = LinearSoftmaxDenoiser.zeros(data.spec, data.length, 2, time_channel=True)
    den = base.with_params(**{k: rng.normal(size=v.shape) for k, v in base.params().items()})
    batch = corrupt_batch(data.sequences, list(data.labels), LINEAR, rng, data.spec)
    w = loss_weights("ddm-linear", batch.t, LINEAR)
    rows = den.label_rows(batch.labels, len(data))
    ref = float(reference_loss(den.params(), data.spec, batch, w, rows, dtype=dtype))
    assert ref == pytest.approx(masked_cross_entropy(den, batch, w).loss, rel=1e-12)
