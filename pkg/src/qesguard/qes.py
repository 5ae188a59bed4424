"""Layer-by-layer energy-separation training with selective quantization and freezing."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .detector import DetectorState, layer_forward, sample_energies, to_float32_grid
from .numerics import GradTape, Tensor, backward, mean, relu, square, sub
from .quantization import QuantSpec

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_A = (0.9, 1.3, 2.0)
DEFAULT_LRS = (0.005, 0.002, 0.002)


class ConfigError(ValueError):
    pass


def default_lambda_a(n: int) -> list:
    """Adversarial targets for n layers: the reference three, extended by +0.7 per extra layer."""
    base = list(DEFAULT_LAMBDA_A[:n])
    while len(base) < n:
        base.append(round(base[-1] + 0.7, 10))
    return base


def default_lrs(n: int) -> list:
    return list(DEFAULT_LRS[:n]) + [DEFAULT_LRS[-1]] * max(0, n - len(DEFAULT_LRS))


@dataclass
class TrainConfig:
    lambda_n: Optional[list] = None  # default 0.1 per layer
    lambda_a: Optional[list] = None  # default [0.9, 1.3, 2.0]
    lrs: Optional[list] = None  # default [0.005, 0.002, 0.002]
    epochs: Union[int, list] = 500
    batch_size: int = 200
    bits: Optional[int] = 16
    seed: int = 0
    optimizer: str = "sgd"  # "sgd" | "adam"
    momentum: float = 0.0
    lr_scale: float = 1.0  # multiplies every per-layer rate
    reduction: str = "sample"  # "sample": MSE over per-sample energies; "batch": of batch energies

    def resolved(self, n: int) -> "TrainConfig":
        """Fill defaults for an n-layer detector and validate."""
        c = TrainConfig(**asdict(self))
        c.lambda_n = list(c.lambda_n) if c.lambda_n is not None else [0.1] * n
        c.lambda_a = list(c.lambda_a) if c.lambda_a is not None else default_lambda_a(n)
        c.lrs = list(c.lrs) if c.lrs is not None else default_lrs(n)
        c.epochs = [c.epochs] * n if isinstance(c.epochs, int) else list(c.epochs)
        c.validate(n)
        return c

    def validate(self, n: int) -> None:
        for name in ("lambda_n", "lambda_a", "lrs", "epochs"):
            v = getattr(self, name)
            if v is None or len(v) != n:
                raise ConfigError(f"{name} needs one entry per layer ({n}), got {v}")
        for i, (ln, la) in enumerate(zip(self.lambda_n, self.lambda_a)):
            if not la > ln:
                raise ConfigError(f"layer {i + 1}: lambda_a={la} must exceed lambda_n={ln}")
        for a, b in zip(self.lambda_a, self.lambda_a[1:]):
            if not b > a:
                raise ConfigError(f"lambda_a must increase strictly across layers, got {self.lambda_a}")
        if any(lr < 0 for lr in self.lrs) or self.lr_scale < 0:
            raise ConfigError("learning rates must be >= 0")
        if any(e < 0 for e in self.epochs):
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.bits is not None:
            QuantSpec(self.bits)
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.reduction not in ("sample", "batch"):
            raise ConfigError("reduction must be 'sample' or 'batch'")

    def as_dict(self) -> dict:
        return asdict(self)


def qes_loss(e_nat, e_adv, lambda_n: float, lambda_a: float, y: int):
    """y * (e_nat - lambda_n)^2 + (1 - y) * (e_adv - lambda_a)^2.

    Scalars give a float; Tensors give a differentiable mean over samples.
    """
    if y not in (0, 1):
        raise ValueError("y must be 0 or 1")
    if isinstance(e_nat, Tensor) or isinstance(e_adv, Tensor):
        e, lam = (e_nat, lambda_n) if y == 1 else (e_adv, lambda_a)
        return mean(square(sub(e, lam)))
    if not (np.isfinite(e_nat) and np.isfinite(e_adv)):
        raise ValueError("energies must be finite")
    return float(y * (e_nat - lambda_n) ** 2 + (1 - y) * (e_adv - lambda_a) ** 2)


def separation_loss(e_nat: Tensor, e_adv: Tensor, lambda_n: float, lambda_a: float,
                    reduction: str = "sample") -> Tensor:
    """Both loss terms for one natural and one adversarial batch of per-sample energies."""
    if reduction == "batch":
        e_nat, e_adv = mean(e_nat), mean(e_adv)
    return qes_loss(e_nat, e_adv, lambda_n, lambda_a, 1) + qes_loss(e_nat, e_adv, lambda_n, lambda_a, 0)


class _Optimizer:
    def __init__(self, kind: str, lr: float, momentum: float = 0.0):
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.t = 0
        self.m = self.v = None

    def step(self, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.lr == 0:
            return w
        self.t += 1
        if self.m is None:
            self.m, self.v = np.zeros_like(w), np.zeros_like(w)
        if self.kind == "sgd":
            if self.momentum:
                self.m = self.momentum * self.m + g
                g = self.m
            return w - self.lr * g
        b1, b2 = 0.9, 0.999
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        mh = self.m / (1 - b1 ** self.t)
        vh = self.v / (1 - b2 ** self.t)
        return w - self.lr * mh / (np.sqrt(vh) + 1e-8)


def _schedule(d: DetectorState, i: int, bits) -> DetectorState:
    """Layers 1..i+1 (0-based ..i) at k bits, the rest full precision."""
    out = d.copy()
    out.bits = [bits if j <= i else None for j in range(d.n_layers)]
    return out


def prefix_activations(d: DetectorState, i: int, x, hook: Optional[Callable] = None,
                       chunk: int = 1000) -> np.ndarray:
    """Post-ReLU input to layer i (0-based) through the state's frozen prefix."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if i == 0:
        return x
    parts = []
    for s in range(0, len(x), chunk):
        h = Tensor(x[s : s + chunk], check=False)
        for j in range(i):
            if hook is not None:
                hook(j, d.bits[j])
            z = layer_forward(d, j, h)
            h = relu(z) if d.spec.layers[j].relu_after else z
        parts.append(h.data)
    return np.concatenate(parts) if parts else np.zeros((0,))


def train_layer(d: DetectorState, i: int, x_nat, x_adv, cfg: TrainConfig,
                hook: Optional[Callable] = None, inputs: Optional[tuple] = None,
                monitor: Optional[Callable] = None) -> DetectorState:
    """Optimize layer i (0-based) with layers before it frozen.

    ``inputs`` may carry precomputed prefix activations (nat, adv) for layer i.
    ``hook(layer, bits)`` sees every layer forward; ``monitor(layer, epoch,
    loss, state)`` is called after each epoch.
    """
    n = d.n_layers
    if not 0 <= i < n:
        raise ValueError(f"layer index {i} outside [0, {n})")
    c = cfg.resolved(n)
    for j in range(i):
        if not d.frozen[j]:
            raise ValueError(f"layer {j + 1} must be trained and frozen before layer {i + 1}")
    x_nat = np.asarray(getattr(x_nat, "data", x_nat), dtype=np.float64)
    x_adv = np.asarray(getattr(x_adv, "data", x_adv), dtype=np.float64)
    if len(x_nat) != len(x_adv):
        raise ValueError(f"natural ({len(x_nat)}) and adversarial ({len(x_adv)}) sets differ in length")

    out = _schedule(d, i, c.bits)
    out.weights = list(out.weights)
    if inputs is None:
        p_nat = prefix_activations(out, i, x_nat, hook)
        p_adv = prefix_activations(out, i, x_adv, hook)
    else:
        p_nat, p_adv = inputs

    ln, la = c.lambda_n[i], c.lambda_a[i]
    opt = _Optimizer(c.optimizer, c.lrs[i] * c.lr_scale, c.momentum)
    rng = np.random.default_rng([c.seed, i])
    w = np.array(out.weights[i], dtype=np.float64)
    history = []
    m = len(p_nat)
    for ep in range(c.epochs[i]):
        perm = rng.permutation(m)
        total, count = 0.0, 0
        for s in range(0, m, c.batch_size):
            idx = perm[s : s + c.batch_size]
            with GradTape() as tape:
                wt = Tensor(w, requires_grad=True, check=False)
                out.weights[i] = wt
                if hook is not None:
                    hook(i, out.bits[i])
                e_n = sample_energies(layer_forward(out, i, Tensor(p_nat[idx], check=False)))
                if hook is not None:
                    hook(i, out.bits[i])
                e_a = sample_energies(layer_forward(out, i, Tensor(p_adv[idx], check=False)))
                loss = separation_loss(e_n, e_a, ln, la, c.reduction)
            lv = loss.item()
            if not np.isfinite(lv):
                raise FloatingPointError(f"layer {i + 1}: loss became non-finite in epoch {ep + 1}")
            w = opt.step(w, backward(loss, tape)[wt])
            total += lv * len(idx)
            count += len(idx)
        out.weights[i] = w
        history.append(total / max(count, 1))
        log.info("layer %d epoch %d loss %.6f", i + 1, ep + 1, history[-1])
        if monitor is not None:
            monitor(i, ep, history[-1], out)
    # checkpoints hold 32-bit weights; keep the in-memory state identical to a reload
    out.weights[i] = to_float32_grid(w) if c.epochs[i] else w
    out.frozen = [j <= i for j in range(n)]
    out.metadata = dict(out.metadata)
    out.metadata.setdefault("history", {})
    out.metadata["history"] = dict(out.metadata["history"], **{str(i + 1): history})
    return out


def qes_train(d0: DetectorState, x_nat, x_adv, cfg: TrainConfig, hook: Optional[Callable] = None,
              monitor: Optional[Callable] = None) -> DetectorState:
    """Train layers strictly in order 1..n; returns the detector with every layer at k bits."""
    x_nat = np.asarray(getattr(x_nat, "data", x_nat), dtype=np.float64)
    x_adv = np.asarray(getattr(x_adv, "data", x_adv), dtype=np.float64)
    if len(x_nat) != len(x_adv):
        raise ValueError(f"natural ({len(x_nat)}) and adversarial ({len(x_adv)}) sets differ in length")
    c = cfg.resolved(d0.n_layers)
    d = d0.copy()
    d.frozen = [False] * d.n_layers
    d.metadata = dict(d.metadata, history={})
    p_nat, p_adv = x_nat, x_adv
    for i in range(d.n_layers):
        d = train_layer(d, i, x_nat, x_adv, c, hook=hook, inputs=(p_nat, p_adv), monitor=monitor)
        if i + 1 < d.n_layers:
            # the next layer's input is this (now frozen) layer's quantized output
            p_nat = _advance(d, i, p_nat, hook)
            p_adv = _advance(d, i, p_adv, hook)
    d.bits = [c.bits] * d.n_layers
    d.metadata.update({"train_config": c.as_dict(), "input_normalization": "none; raw [0,1] pixels"})
    return d


def _advance(d: DetectorState, i: int, h: np.ndarray, hook, chunk: int = 1000) -> np.ndarray:
    parts = []
    for s in range(0, len(h), chunk):
        if hook is not None:
            hook(i, d.bits[i])
        z = layer_forward(d, i, Tensor(h[s : s + chunk], check=False))
        parts.append((relu(z) if d.spec.layers[i].relu_after else z).data)
    return np.concatenate(parts)
