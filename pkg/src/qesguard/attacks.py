"""Gradient-based adversarial attacks on a differentiable classifier, plus Gaussian noise.

Every attack takes images in [0, 1] shaped (N, C, H, W) and returns a new
array of the same shape, also in [0, 1]. L-inf attacks project onto the
eps-ball around the clean input after every step.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .numerics import (GradTape, Tensor, add, backward, cross_entropy, crop2d, max_, mean, mul,
                       pad2d, relu, scale, square, sub, sum_, tanh)

log = logging.getLogger(__name__)

KINDS = ("FGSM", "FFGSM", "BIM", "PGD", "PGD-L2", "MIFGSM", "DIFGSM", "TPGD", "CW", "GN")
ITERATIVE = {"BIM", "PGD", "PGD-L2", "MIFGSM", "DIFGSM", "TPGD", "CW"}


class AttackError(RuntimeError):
    pass


def parse_eps(v) -> float:
    """Accept 0.03, "0.03" or "8/255"."""
    if isinstance(v, str):
        try:
            f = Fraction(v.strip())
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"cannot parse budget {v!r}; use a decimal or a fraction like 8/255") from None
        return float(f)
    return float(v)


@dataclass
class AttackConfig:
    kind: str
    eps: float = 8 / 255
    steps: int = 10
    alpha: Optional[float] = None  # default eps/4 (L-inf) or eps/4 (L2)
    decay: float = 1.0  # MIFGSM momentum
    prob: float = 0.5  # DIFGSM transform probability
    max_pad: int = 4  # DIFGSM
    sigma: float = 0.1  # GN
    c: float = 100.0  # C&W
    kappa: float = 0.0
    lr: float = 0.01  # C&W optimizer step
    target: Optional[int] = None  # TPGD; None -> (label + 1) mod classes
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.upper().replace("_", "-")
        if self.kind == "PGDL2":
            self.kind = "PGD-L2"
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; choose from {', '.join(KINDS)}")
        self.eps = parse_eps(self.eps)
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.kind in ITERATIVE and self.steps < 1:
            raise ValueError(f"{self.kind} needs steps >= 1")
        if self.alpha is not None:
            self.alpha = parse_eps(self.alpha)
            if self.alpha <= 0:
                raise ValueError("step size alpha must be > 0")

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else self.eps / 4

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# helpers


def _logits(model, x: Tensor) -> Tensor:
    fn = getattr(model, "logits", None) or (model if callable(model) else None)
    if fn is None:
        raise AttackError("model exposes no differentiable logits")
    out = fn(x)
    if not isinstance(out, Tensor):
        raise AttackError("model output is not a differentiable tensor; gradient unavailable")
    return out


def _grad(model, x: np.ndarray, loss_fn) -> np.ndarray:
    """d loss / d x for a batch. loss_fn maps logits (and the input tensor) to a scalar."""
    with GradTape() as tape:
        xt = Tensor(x, requires_grad=True, check=False)
        loss = loss_fn(_logits(model, xt), xt)
    g = backward(loss, tape)[xt]
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return g


def _ce(labels):
    # summed so per-sample gradients do not shrink with batch size
    return lambda z, _x: cross_entropy(z, labels, reduction="sum")


def _project(x: np.ndarray, x_adv: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(x + np.clip(x_adv - x, -eps, eps), 0.0, 1.0)


def _check(x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"attacks take (N, C, H, W) batches, got shape {x.shape}")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    return x


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# L-inf family


def fgsm(model, x, labels, eps: float) -> np.ndarray:
    x = _check(x)
    g = _grad(model, x, _ce(labels))
    return _project(x, x + eps * np.sign(g), eps)


def pgd(model, x, labels, eps: float, alpha: Optional[float] = None, steps: int = 10,
        random_start: bool = True, seed=0) -> np.ndarray:
    """Iterated sign-gradient ascent with L-inf projection. random_start=False is BIM."""
    x = _check(x)
    alpha = eps / 4 if alpha is None else alpha
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    x_adv = x.copy()
    if random_start:
        x_adv = np.clip(x + _rng(seed).uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    for _ in range(steps):
        g = _grad(model, x_adv, _ce(labels))
        x_adv = _project(x, x_adv + alpha * np.sign(g), eps)
    return x_adv


def bim(model, x, labels, eps: float, alpha: Optional[float] = None, steps: int = 10) -> np.ndarray:
    return pgd(model, x, labels, eps, alpha, steps, random_start=False)


def ffgsm(model, x, labels, eps: float, alpha: Optional[float] = None, seed=0) -> np.ndarray:
    """Uniform random start in the eps-ball, then one sign step of size alpha (default 1.25 eps)."""
    x = _check(x)
    alpha = 1.25 * eps if alpha is None else alpha
    x0 = np.clip(x + _rng(seed).uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    g = _grad(model, x0, _ce(labels))
    return _project(x, x0 + alpha * np.sign(g), eps)


def _l1_normalize(g: np.ndarray) -> np.ndarray:
    m = np.mean(np.abs(g), axis=tuple(range(1, g.ndim)), keepdims=True)
    return g / np.maximum(m, np.finfo(np.float64).tiny)


def mifgsm(model, x, labels, eps: float, alpha: Optional[float] = None, steps: int = 10,
           decay: float = 1.0) -> np.ndarray:
    x = _check(x)
    alpha = eps / 4 if alpha is None else alpha
    x_adv = x.copy()
    m = np.zeros_like(x)
    for _ in range(steps):
        g = _grad(model, x_adv, _ce(labels))
        m = decay * m + _l1_normalize(g)
        x_adv = _project(x, x_adv + alpha * np.sign(m), eps)
    return x_adv


def _diverse(x: Tensor, rng, prob: float, max_pad: int) -> Tensor:
    """With probability prob: zero-pad to (H+d, W+d) at a random offset, then crop a random HxW window."""
    if max_pad < 1 or rng.random() >= prob:
        return x
    h, w = x.shape[2], x.shape[3]
    d = int(rng.integers(1, max_pad + 1))
    top, left = int(rng.integers(0, d + 1)), int(rng.integers(0, d + 1))
    padded = pad2d(x, top, d - top, left, d - left)
    ct, cl = int(rng.integers(0, d + 1)), int(rng.integers(0, d + 1))
    return crop2d(padded, ct, cl, h, w)


def difgsm(model, x, labels, eps: float, alpha: Optional[float] = None, steps: int = 10,
           decay: float = 0.0, prob: float = 0.5, max_pad: int = 4, seed=0) -> np.ndarray:
    x = _check(x)
    alpha = eps / 4 if alpha is None else alpha
    rng = _rng(seed)
    x_adv = x.copy()
    m = np.zeros_like(x)
    for _ in range(steps):
        g = _grad(model, x_adv,
                  lambda _z, xt: cross_entropy(_logits(model, _diverse(xt, rng, prob, max_pad)), labels,
                                               reduction="sum"))
        m = decay * m + _l1_normalize(g) if decay else g
        x_adv = _project(x, x_adv + alpha * np.sign(m), eps)
    return x_adv


def tpgd(model, x, target, eps: float, alpha: Optional[float] = None, steps: int = 10,
         random_start: bool = True, seed=0) -> np.ndarray:
    """Targeted PGD: descend the cross-entropy of the target class."""
    x = _check(x)
    alpha = eps / 4 if alpha is None else alpha
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), (len(x),))
    x_adv = x.copy()
    if random_start:
        x_adv = np.clip(x + _rng(seed).uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    for _ in range(steps):
        g = _grad(model, x_adv, _ce(target))
        x_adv = _project(x, x_adv - alpha * np.sign(g), eps)
    return x_adv


# ---------------------------------------------------------------------------
# L2 family


def _l2(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=tuple(range(1, a.ndim)), keepdims=True))


def pgd_l2(model, x, labels, eps: float = 0.5, alpha: Optional[float] = None, steps: int = 10,
           random_start: bool = True, seed=0) -> np.ndarray:
    x = _check(x)
    alpha = eps / 4 if alpha is None else alpha
    tiny = 1e-12
    x_adv = x.copy()
    if random_start and eps > 0:
        rng = _rng(seed)
        d = rng.normal(size=x.shape)
        r = rng.uniform(0, 1, size=(len(x),) + (1,) * (x.ndim - 1))
        x_adv = np.clip(x + d / np.maximum(_l2(d), tiny) * r * eps, 0.0, 1.0)
    for _ in range(steps):
        g = _grad(model, x_adv, _ce(labels))
        x_adv = x_adv + alpha * g / np.maximum(_l2(g), tiny)
        delta = x_adv - x
        n = _l2(delta)
        delta = delta * np.minimum(1.0, eps / np.maximum(n, tiny))
        x_adv = np.clip(x + delta, 0.0, 1.0)
    return x_adv


def cw(model, x, labels, c: float = 100.0, kappa: float = 0.0, steps: int = 100,
       lr: float = 0.01) -> tuple:
    """Carlini-Wagner L2 in tanh space, optimized with Adam.

    Minimizes ||x' - x||^2 + c * max(Z_y - max_{i != y} Z_i, -kappa) where
    x' = (tanh(w) + 1) / 2. Returns (x_adv, achieved per-sample L2): the
    smallest-distance misclassified iterate where one exists, else the last one.
    """
    x = _check(x)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(x)
    w = np.arctanh(np.clip(2 * x - 1, -1 + 1e-6, 1 - 1e-6))
    m1, m2 = np.zeros_like(w), np.zeros_like(w)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    best = None
    best_l2 = np.full(n, np.inf)
    last = x
    for t in range(1, steps + 1):
        with GradTape() as tape:
            wt = Tensor(w, requires_grad=True, check=False)
            xa = scale(add(tanh(wt), 1.0), 0.5)
            z = _logits(model, xa)
            onehot = np.zeros(z.shape)
            onehot[np.arange(n), labels] = 1.0
            real = sum_(mul(z, Tensor(onehot, check=False)), axis=1)
            other = max_(sub(z, Tensor(onehot * 1e9, check=False)), axis=1)
            f = sub(relu(add(sub(real, other), kappa)), kappa)
            dist = sum_(square(sub(xa, Tensor(x, check=False))), axis=(1, 2, 3))
            loss = sum_(add(dist, scale(f, c)))
        pred = np.argmax(z.data, axis=1)
        l2 = np.sqrt(dist.data)
        improved = (pred != labels) & (l2 < best_l2)
        if np.any(improved):
            best = xa.data.copy() if best is None else best
            best[improved] = xa.data[improved]
            best_l2[improved] = l2[improved]
        last = xa.data
        g = backward(loss, tape)[wt]
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        w = w - lr * (m1 / (1 - b1 ** t)) / (np.sqrt(m2 / (1 - b2 ** t)) + adam_eps)
    out = last.copy()
    if best is not None:
        found = np.isfinite(best_l2)
        out[found] = best[found]
    out = np.clip(out, 0.0, 1.0)
    return out, _l2(out - x).ravel()


def gn(x, sigma: float, seed=0) -> np.ndarray:
    """Additive Gaussian noise, clamped to [0, 1]."""
    x = _check(x)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return x.copy()
    return np.clip(x + _rng(seed).normal(0.0, sigma, size=x.shape), 0.0, 1.0)


# ---------------------------------------------------------------------------


def run_attack(model, x, labels, cfg: AttackConfig, batch_size: int = 500,
               num_classes: Optional[int] = None) -> tuple:
    """Run cfg over x in chunks. Returns (x_adv, info dict)."""
    x = _check(x)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(x):
        raise ValueError("images and labels differ in length")
    rng = np.random.default_rng(cfg.seed)
    out = np.empty_like(x)
    l2s = []
    k = cfg.kind
    for s in range(0, len(x), batch_size):
        xb, yb = x[s : s + batch_size], labels[s : s + batch_size]
        chunk_seed = int(rng.integers(2**63 - 1))
        if k == "FGSM":
            r = fgsm(model, xb, yb, cfg.eps)
        elif k == "FFGSM":
            r = ffgsm(model, xb, yb, cfg.eps, cfg.alpha, seed=chunk_seed)
        elif k == "BIM":
            r = bim(model, xb, yb, cfg.eps, cfg.alpha, cfg.steps)
        elif k == "PGD":
            r = pgd(model, xb, yb, cfg.eps, cfg.alpha, cfg.steps, cfg.random_start, seed=chunk_seed)
        elif k == "PGD-L2":
            r = pgd_l2(model, xb, yb, cfg.eps, cfg.alpha, cfg.steps, cfg.random_start, seed=chunk_seed)
        elif k == "MIFGSM":
            r = mifgsm(model, xb, yb, cfg.eps, cfg.alpha, cfg.steps, cfg.decay)
        elif k == "DIFGSM":
            r = difgsm(model, xb, yb, cfg.eps, cfg.alpha, cfg.steps, 0.0, cfg.prob, cfg.max_pad,
                       seed=chunk_seed)
        elif k == "TPGD":
            if cfg.target is not None:
                tgt = np.full(len(yb), cfg.target)
            else:
                if num_classes is None:
                    num_classes = getattr(model, "num_classes", None) or int(labels.max()) + 1
                tgt = (yb + 1) % num_classes
            r = tpgd(model, xb, tgt, cfg.eps, cfg.alpha, cfg.steps, cfg.random_start, seed=chunk_seed)
        elif k == "CW":
            r, l2 = cw(model, xb, yb, cfg.c, cfg.kappa, cfg.steps, cfg.lr)
            l2s.append(l2)
        else:  # GN
            r = gn(xb, cfg.sigma, seed=chunk_seed)
        out[s : s + len(xb)] = r
        log.debug("%s: %d/%d", k, s + len(xb), len(x))
    delta = out - x
    info = {
        "config": cfg.as_dict(),
        "linf_max": float(np.abs(delta).max()) if delta.size else 0.0,
        "l2_mean": float(np.mean(np.sqrt((delta ** 2).reshape(len(x), -1).sum(1)))) if len(x) else 0.0,
    }
    if l2s:
        info["cw_l2"] = np.concatenate(l2s).tolist()
    return out, info
