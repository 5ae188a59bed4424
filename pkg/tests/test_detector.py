import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qesguard.detector import (
    DetectorState, LayerSpec, energy_signature, forward_with_energies, init_detector, model_info, preset,
    quantize_weights, sample_energies,
)
from qesguard.numerics import Tensor


def _zero(d):
    d = d.copy()
    d.weights = [np.zeros_like(w) for w in d.weights]
    return d


def test_presets():
    assert [(l.in_channels, l.out_channels) for l in preset("D1").layers] == [(3, 8), (8, 16), (16, 32)]
    assert [(l.in_channels, l.out_channels) for l in preset("D2").layers] == [(3, 16), (16, 32), (32, 64)]
    assert [(l.in_channels, l.out_channels) for l in preset("d3").layers] == [(3, 32), (32, 32), (32, 64)]
    assert [l.relu_after for l in preset("D1").layers] == [True, True, False]
    assert all((l.kernel, l.stride, l.padding) == (3, 2, 1) for l in preset("D1").layers)
    with pytest.raises(ValueError):
        preset("D9")


def test_depth_ablation():
    s = preset("D1", depth=5)
    assert s.n_layers == 5 and s.layers[-1].in_channels == 32 and not s.layers[-1].relu_after
    assert preset("D1", depth=1).n_layers == 1


def test_energy_signature_examples():
    assert energy_signature(Tensor(-np.ones((2, 3, 4, 4)))).item() == 1.0
    assert energy_signature(Tensor(np.zeros((1, 1, 2, 2)))).item() == 0.0
    assert energy_signature(Tensor(np.array([1.0, -2, 3, -4]).reshape(1, 1, 2, 2))).item() == 2.5
    with pytest.raises(ValueError):
        energy_signature(Tensor(np.zeros((0, 1, 2, 2))))


def test_init_is_uniform_fan_in_and_float32():
    d = init_detector(preset("D1"), seed=3)
    for w, l in zip(d.weights, d.spec.layers):
        assert np.abs(w).max() <= 1 / np.sqrt(l.in_channels * 9)
        assert np.array_equal(w, w.astype(np.float32).astype(np.float64))


def test_zero_weights_zero_energy():
    d = _zero(init_detector(preset("D1"), bits=16))
    e, _ = forward_with_energies(d, np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))
    assert np.all(e.per_sample == 0)


def test_single_sample_energies_finite():
    d = init_detector(preset("D1"), bits=8)
    e, pre = forward_with_energies(d, np.random.default_rng(1).uniform(size=(1, 3, 32, 32)))
    assert e.per_sample.shape == (1, 3) and len(pre) == 3
    assert np.all(np.isfinite(e.per_sample)) and np.all(e.per_sample >= 0)


def test_duplicate_batch_same_energy():
    d = init_detector(preset("D1"), bits=16)
    x = np.random.default_rng(2).uniform(size=(1, 3, 32, 32))
    e1, _ = forward_with_energies(d, x)
    e2, _ = forward_with_energies(d, np.concatenate([x, x]))
    np.testing.assert_allclose(e2.batch, e1.batch, rtol=1e-12)


def test_batch_energy_is_mean_of_samples():
    d = init_detector(preset("D1"))
    x = np.random.default_rng(3).uniform(size=(5, 3, 32, 32))
    e, pre = forward_with_energies(d, x)
    for i, z in enumerate(pre):
        np.testing.assert_allclose(energy_signature(Tensor(z)).item(), e.batch[i], rtol=1e-12)
        np.testing.assert_allclose(sample_energies(Tensor(z)).data, e.per_sample[:, i], rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 10), st.integers(0, 1000))
def test_layer1_energy_scales_linearly(alpha, seed):
    d = init_detector(preset("D1"), seed=seed)  # full precision
    x = np.random.default_rng(seed).uniform(size=(2, 3, 32, 32))
    e, _ = forward_with_energies(d, x, upto_layer=1)
    ea, _ = forward_with_energies(d, alpha * x, upto_layer=1)
    np.testing.assert_allclose(ea.per_sample, alpha * e.per_sample, rtol=1e-9, atol=1e-12)


def test_prefix_agreement():
    d = init_detector(preset("D2"), bits=12)
    x = np.random.default_rng(4).uniform(size=(3, 3, 32, 32))
    full, _ = forward_with_energies(d, x)
    for j in (1, 2):
        part, _ = forward_with_energies(d, x, upto_layer=j)
        np.testing.assert_array_equal(part.per_sample, full.per_sample[:, :j])
    with pytest.raises(ValueError):
        forward_with_energies(d, x, upto_layer=4)


def test_shape_mismatch():
    d = init_detector(preset("D1"))
    with pytest.raises(ValueError):
        forward_with_energies(d, np.zeros((1, 1, 32, 32)))


def test_hook_sees_every_layer():
    d = init_detector(preset("D1"), bits=16)
    seen = []
    forward_with_energies(d, np.zeros((1, 3, 32, 32)), hook=lambda i, b: seen.append((i, b)))
    assert seen == [(0, 16), (1, 16), (2, 16)]


def test_fingerprint_changes_with_weights():
    d = init_detector(preset("D1"))
    e = d.copy()
    e.weights = [w.copy() for w in d.weights]
    assert e.fingerprint() == d.fingerprint()
    e.weights[2] = e.weights[2] + 1e-3
    assert e.fingerprint() != d.fingerprint()
    assert e.layer_fingerprint(2) == d.layer_fingerprint(2)


def test_model_info_reports_size():
    info = model_info(init_detector(preset("D1"), bits=16))
    assert info["parameters"] == 8 * 27 + 16 * 72 + 32 * 144 == 5976
    assert info["weight_bytes"] == 5976 * 2
    assert info["reference_weight_bytes"] == 12 * 1024
    assert info["n_mac_full"] == 55296 + 16 * 64 * 72 + 32 * 16 * 144


def test_quantize_weights_bakes_grid():
    d = init_detector(preset("D1"), bits=4)
    q = quantize_weights(d)
    for w in q.weights:
        s = np.abs(w).max() / 7
        np.testing.assert_allclose(w / s, np.round(w / s), atol=1e-9)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec(0, 8)
