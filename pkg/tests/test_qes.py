import hashlib

import numpy as np
import pytest

from qesguard.detector import all_energies, init_detector, preset
from qesguard.qes import (
    ConfigError, TrainConfig, default_lambda_a, prefix_activations, qes_loss, qes_train, separation_loss,
    train_layer,
)
from qesguard.numerics import Tensor

SHAPE = (3, 16, 16)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(64,) + SHAPE)
    x_adv = np.clip(x + rng.choice([-8 / 255, 8 / 255], size=x.shape), 0, 1)
    return x, x_adv


def _d(depth=None, bits=16, seed=0):
    return init_detector(preset("D1", SHAPE, depth), seed=seed, bits=bits)


def _hash(ws):
    return hashlib.sha256(b"".join(np.ascontiguousarray(w).tobytes() for w in ws)).hexdigest()


def test_qes_loss_examples():
    assert qes_loss(0.1, 5.0, 0.1, 0.9, 1) == 0.0
    assert qes_loss(7.0, 0.9, 0.1, 0.9, 0) == 0.0
    assert qes_loss(0.0, 0.4, 0.1, 0.9, 0) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        qes_loss(0.1, 0.1, 0.1, 0.9, 2)
    with pytest.raises(ValueError):
        qes_loss(float("nan"), 0.1, 0.1, 0.9, 1)


def test_separation_loss_reductions():
    en, ea = Tensor(np.array([0.1, 0.3])), Tensor(np.array([0.9, 0.5]))
    assert separation_loss(en, ea, 0.1, 0.9).item() == pytest.approx((0 + 0.04) / 2 + (0 + 0.16) / 2)
    assert separation_loss(en, ea, 0.1, 0.9, "batch").item() == pytest.approx(0.01 + 0.04)


def test_config_defaults_and_validation():
    c = TrainConfig().resolved(3)
    assert c.lambda_n == [0.1] * 3 and c.lambda_a == [0.9, 1.3, 2.0] and c.lrs == [0.005, 0.002, 0.002]
    assert c.batch_size == 200 and c.optimizer == "sgd" and c.momentum == 0
    assert default_lambda_a(5) == [0.9, 1.3, 2.0, 2.7, 3.4] and default_lambda_a(1) == [0.9]
    for bad in (dict(lambda_a=[0.05, 1.3, 2.0]), dict(lambda_a=[0.9, 0.8, 2.0]), dict(lrs=[0.1, -1, 0.1]),
                dict(epochs=[1, 2]), dict(bits=5), dict(optimizer="rmsprop"), dict(momentum=1.0)):
        with pytest.raises((ConfigError, ValueError)):
            TrainConfig(**bad).resolved(3)


def test_config_error_before_any_epoch(data):
    calls = []
    with pytest.raises(ConfigError):
        train_layer(_d(), 0, *data, TrainConfig(lambda_a=[0.9, 0.5, 2.0], epochs=5),
                    monitor=lambda *a: calls.append(a))
    assert calls == []


def test_zero_epochs_and_zero_lr_leave_weights(data):
    d = _d()
    for cfg in (TrainConfig(epochs=0), TrainConfig(epochs=2, lrs=[0, 0, 0], batch_size=32)):
        out = train_layer(d, 0, *data, cfg)
        assert np.array_equal(out.weights[0], d.weights[0])


def test_only_layer_i_changes_and_prefix_frozen(data):
    cfg = TrainConfig(epochs=[2, 2, 2], batch_size=32, optimizer="adam", lr_scale=20)
    d1 = train_layer(_d(), 0, *data, cfg)
    before = _hash(d1.weights[:1])
    d2 = train_layer(d1, 1, *data, cfg)
    assert _hash(d2.weights[:1]) == before
    assert not np.array_equal(d2.weights[1], d1.weights[1])
    assert np.array_equal(d2.weights[2], d1.weights[2])
    assert d2.frozen == [True, True, False]


def test_layer_order_enforced(data):
    with pytest.raises(ValueError, match="frozen"):
        train_layer(_d(), 1, *data, TrainConfig(epochs=1))


def test_quantization_schedule(data):
    seen = []
    cfg = TrainConfig(epochs=[1, 1, 1], batch_size=32, bits=8)
    d = train_layer(_d(bits=None), 0, *data, cfg)
    d = train_layer(d, 1, *data, cfg, hook=lambda i, b: seen.append((i, b)))
    assert set(seen) == {(0, 8), (1, 8)}
    assert d.bits == [8, 8, None]


def test_synthetic_doubled_inputs_separate(data):
    x = data[0]
    cfg = TrainConfig(epochs=[30, 1, 1], batch_size=32, optimizer="adam", lr_scale=20)
    d = train_layer(_d(), 0, x, 2 * x, cfg)
    e_nat, e_adv = all_energies(d, x)[:, 0], all_energies(d, 2 * x)[:, 0]
    assert e_adv.mean() > e_nat.mean()
    hist = d.metadata["history"]["1"]
    assert len(hist) == 30 and hist[-1] <= hist[0]


def test_non_divergence_plain_sgd(data):
    d = train_layer(_d(), 0, *data, TrainConfig(epochs=[5, 1, 1], batch_size=16))
    hist = d.metadata["history"]["1"]
    assert hist[-1] <= hist[0]


def test_single_layer_detector_is_one_train_layer(data):
    cfg = TrainConfig(epochs=3, batch_size=32, lambda_n=[0.1], lambda_a=[0.9], lrs=[0.01])
    a = qes_train(_d(depth=1), *data, cfg)
    b = train_layer(_d(depth=1), 0, *data, cfg)
    assert np.array_equal(a.weights[0], b.weights[0])


def test_determinism_and_final_bits(data):
    cfg = TrainConfig(epochs=[2, 1, 1], batch_size=32, bits=12, optimizer="adam", lr_scale=20, seed=3)
    a = qes_train(_d(bits=None), *data, cfg)
    b = qes_train(_d(bits=None), *data, cfg)
    assert a.fingerprint() == b.fingerprint()
    assert a.bits == [12, 12, 12] and a.frozen == [True] * 3
    assert set(a.metadata["history"]) == {"1", "2", "3"}
    assert a.metadata["train_config"]["bits"] == 12


def test_cached_prefix_matches_recomputation(data):
    cfg = TrainConfig(epochs=[2, 2, 1], batch_size=32, optimizer="adam", lr_scale=20)
    full = qes_train(_d(), *data, cfg)
    d = train_layer(_d(), 0, *data, cfg)
    d = train_layer(d, 1, *data, cfg)  # recomputes the prefix from raw inputs
    assert np.array_equal(d.weights[1], full.weights[1])
    p = prefix_activations(d, 1, data[0])
    assert p.shape == (64, 8, 8, 8) and np.all(p >= 0)


def test_length_mismatch(data):
    with pytest.raises(ValueError, match="differ"):
        qes_train(_d(), data[0], data[1][:10], TrainConfig(epochs=1))
