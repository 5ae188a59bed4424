import numpy as np
import pytest

from qesguard.attacks import (
    KINDS, AttackConfig, AttackError, bim, cw, difgsm, fgsm, gn, mifgsm, parse_eps, pgd, pgd_l2, run_attack, tpgd,
)
from qesguard.classifier import accuracy, init_classifier, predict, train_classifier
from qesguard.numerics import Tensor, linear, reshape

EPS = 8 / 255


class Linear:
    """logits = flatten(x) @ W.T; enough structure for hand-checked gradients."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=float)
        self.num_classes = self.w.shape[0]

    def logits(self, x):
        return linear(reshape(x, (x.shape[0], -1)), Tensor(self.w))


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 600)
    x = rng.uniform(0.1, 0.5, (600, 3, 8, 8))
    x[np.arange(600), y] += 0.25  # class k is brighter in channel k
    c = train_classifier(x[:500], y[:500], 10, lr=0.05, preset="tiny", seed=1)
    return c, x[500:], y[500:]


def test_parse_eps():
    assert parse_eps("8/255") == 8 / 255 and parse_eps("0.5") == 0.5 and parse_eps(0.1) == 0.1
    with pytest.raises(ValueError):
        parse_eps("eight")
    with pytest.raises(ValueError):
        AttackConfig("PGD", eps=-0.1)
    with pytest.raises(ValueError):
        AttackConfig("SQR")
    with pytest.raises(ValueError):
        AttackConfig("BIM", steps=0)
    assert AttackConfig("pgd_l2").kind == "PGD-L2"
    assert AttackConfig("PGD").step_size == pytest.approx(EPS / 4)


def test_fgsm_zero_eps_identity(trained):
    c, x, y = trained
    assert np.array_equal(fgsm(c, x, y, 0.0), x)


def test_fgsm_positive_gradient_everywhere():
    # CE for label 0 grows with sum(x) when logit 1 rises and logit 0 falls
    model = Linear(np.stack([-np.ones(12), np.ones(12)]))
    x = np.full((2, 3, 2, 2), 0.5)
    np.testing.assert_allclose(fgsm(model, x, [0, 0], EPS), 0.5 + EPS, rtol=0, atol=1e-15)


def test_pgd_one_step_equals_fgsm(trained):
    c, x, y = trained
    a = pgd(c, x, y, EPS, alpha=EPS, steps=1, random_start=False)
    np.testing.assert_array_equal(a, fgsm(c, x, y, EPS))


def test_zero_gradient_model_leaves_input():
    model = Linear(np.zeros((3, 12)))
    x = np.random.default_rng(1).uniform(size=(4, 3, 2, 2))
    assert np.array_equal(pgd(model, x, [0, 1, 2, 0], EPS, random_start=False), x)


def test_mifgsm_zero_decay_is_bim(trained):
    c, x, y = trained
    np.testing.assert_array_equal(mifgsm(c, x, y, EPS, steps=5, decay=0.0), bim(c, x, y, EPS, steps=5))


def test_tpgd_toward_own_class_keeps_prediction(trained):
    c, x, y = trained
    pred = predict(c, x)[0]
    ok = pred == y
    assert ok.sum() >= 50
    xa = tpgd(c, x[ok][:100], y[ok][:100], EPS)
    assert np.array_equal(predict(c, xa)[0], y[ok][:100])


def test_cw_zero_c_stays_at_input(trained):
    c, x, y = trained
    xa, l2 = cw(c, x[:20], y[:20], c=0.0, steps=30)
    assert np.max(np.abs(xa - x[:20])) < 0.02 and np.all(l2 < 0.1)


def test_cw_reports_l2_and_succeeds(trained):
    c, x, y = trained
    xa, l2 = cw(c, x[:30], y[:30], c=100.0, steps=100)
    np.testing.assert_allclose(l2, np.sqrt(((xa - x[:30]) ** 2).sum(axis=(1, 2, 3))), rtol=1e-12)
    assert np.mean(predict(c, xa)[0] != y[:30]) > 0.5


def test_gn():
    x = np.random.default_rng(2).uniform(size=(3, 3, 4, 4))
    assert np.array_equal(gn(x, 0.0), x)
    out = gn(x, 0.1, seed=3)
    assert out.min() >= 0 and out.max() <= 1
    assert np.array_equal(out, gn(x, 0.1, seed=3))
    z = np.random.default_rng(3).normal(0, 0.1, 10 ** 6)
    assert 0.099 <= z.std() <= 0.101


def test_non_differentiable_model():
    with pytest.raises(AttackError):
        fgsm(lambda x: np.zeros((x.shape[0], 2)), np.zeros((1, 1, 2, 2)), [0], EPS)


def test_inputs_validated():
    with pytest.raises(ValueError):
        fgsm(Linear(np.ones((2, 4))), np.full((1, 1, 2, 2), 2.0), [0], EPS)


@pytest.mark.parametrize("kind", [k for k in KINDS if k not in ("CW", "GN")])
def test_budget_on_1000_random_inputs(kind):
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(1000, 3, 8, 8))
    y = rng.integers(0, 10, 1000)
    model = init_classifier("tiny", 10, seed=5)
    cfg = AttackConfig(kind, eps=0.5 if kind == "PGD-L2" else EPS, steps=3, seed=6)
    xa, info = run_attack(model, x, y, cfg)
    assert xa.shape == x.shape and xa.min() >= 0 and xa.max() <= 1
    delta = (xa - x).reshape(len(x), -1)
    if kind == "PGD-L2":
        assert np.all(np.sqrt((delta ** 2).sum(axis=1)) <= 0.5 + 1e-9)
    else:
        assert np.all(np.abs(delta).max(axis=1) <= EPS + 1e-12)
    assert np.any(delta != 0)
    # determinism per seed
    assert np.array_equal(run_attack(model, x[:50], y[:50], cfg)[0], run_attack(model, x[:50], y[:50], cfg)[0])


def test_attacks_reduce_accuracy(trained):
    c, x, y = trained
    nat = accuracy(c, x, y)
    for kind in ("FGSM", "PGD", "BIM", "MIFGSM", "FFGSM", "DIFGSM", "TPGD"):
        xa, _ = run_attack(c, x, y, AttackConfig(kind, eps=EPS * 3, seed=1))
        assert accuracy(c, xa, y) < nat, kind
    xa, info = run_attack(c, x, y, AttackConfig("PGD-L2", eps=1.0))
    assert accuracy(c, xa, y) < nat


def test_difgsm_zero_prob_is_bim(trained):
    c, x, y = trained
    np.testing.assert_array_equal(difgsm(c, x, y, EPS, steps=3, prob=0.0), bim(c, x, y, EPS, steps=3))


def test_pgd_l2_zero_eps(trained):
    c, x, y = trained
    np.testing.assert_array_equal(pgd_l2(c, x, y, eps=0.0), x)
