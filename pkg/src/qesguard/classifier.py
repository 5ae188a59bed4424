"""Small natural-data CNN classifiers used as attack sources and as the cloud model."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import (GradTape, Tensor, backward, conv2d, cross_entropy, global_avg_pool, linear,
                       relu)

log = logging.getLogger(__name__)

# (out_channels, stride) per conv; every conv is 3x3, padding 1, followed by ReLU
PRESETS = {
    "small": ((16, 2), (32, 2), (64, 2), (64, 1)),
    "small-b": ((24, 2), (48, 2), (48, 2), (96, 1)),
    "tiny": ((8, 2), (16, 2), (32, 2), (32, 1)),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ClassifierState:
    preset: str
    convs: list  # [(weight, bias, stride)]
    head: tuple  # (weight (classes, features), bias)
    num_classes: int
    in_channels: int = 3
    metadata: dict = field(default_factory=dict)

    def params(self) -> list:
        out = []
        for w, b, _ in self.convs:
            out += [w, b]
        return out + list(self.head)

    def logits(self, x) -> Tensor:
        """Differentiable forward pass; returns (N, num_classes) logits."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.ndim != 4 or h.shape[1] != self.in_channels:
            raise ValueError(f"classifier expects (N, {self.in_channels}, H, W) input, got {h.shape}")
        for w, b, s in self.convs:
            h = relu(conv2d(h, _t(w), stride=s, padding=1, bias=_t(b)))
        return linear(global_avg_pool(h), _t(self.head[0]), _t(self.head[1]))

    __call__ = logits

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.preset.encode())
        for p in self.params():
            h.update(np.ascontiguousarray(getattr(p, "data", p), dtype="<f8").tobytes())
        return h.hexdigest()


def _t(p) -> Tensor:
    return p if isinstance(p, Tensor) else Tensor(p, check=False)


def init_classifier(preset: str, num_classes: int, seed=0, in_channels: int = 3) -> ClassifierState:
    try:
        arch = PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown classifier preset {preset!r}; choose from {sorted(PRESETS)}") from None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    convs, c = [], in_channels
    for out, stride in arch:
        std = np.sqrt(2.0 / (c * 9))
        convs.append((rng.normal(0, std, (out, c, 3, 3)), np.zeros(out), stride))
        c = out
    bound = 1 / np.sqrt(c)
    head = (rng.uniform(-bound, bound, (num_classes, c)), np.zeros(num_classes))
    return ClassifierState(preset, convs, head, num_classes, in_channels)


def predict(c: ClassifierState, x, batch_size: int = 500) -> tuple:
    """(argmax class, logits). np.argmax picks the lowest index on ties."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    logits = np.concatenate([c.logits(Tensor(x[s : s + batch_size], check=False)).data
                             for s in range(0, len(x), batch_size)]) if len(x) else np.zeros((0, c.num_classes))
    return np.argmax(logits, axis=1), logits


def accuracy(c: ClassifierState, x, labels) -> float:
    pred, _ = predict(c, x)
    return float(np.mean(pred == np.asarray(labels)))


def train_classifier(x, labels, epochs: int, lr: float = 0.05, seed=0, preset: str = "small",
                     num_classes: Optional[int] = None, batch_size: int = 100, momentum: float = 0.9,
                     weight_decay: float = 5e-4, test: Optional[tuple] = None,
                     augment_flip: bool = True) -> ClassifierState:
    """Cross-entropy SGD (momentum, cosine-decayed step size). Deterministic per seed."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) != len(labels):
        raise ValueError("images and labels differ in length")
    k = int(num_classes if num_classes is not None else labels.max() + 1)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    rng = np.random.default_rng(seed)
    c = init_classifier(preset, k, rng, in_channels=x.shape[1])
    params = [np.array(p, dtype=np.float64) for p in c.params()]
    vel = [np.zeros_like(p) for p in params]
    steps_per_epoch = max(1, -(-len(x) // batch_size))
    total = max(1, epochs * steps_per_epoch)
    step = 0
    history = []
    for ep in range(epochs):
        perm = rng.permutation(len(x))
        run_loss = 0.0
        for s in range(0, len(x), batch_size):
            idx = perm[s : s + batch_size]
            xb = x[idx]
            if augment_flip:
                flip = rng.random(len(idx)) < 0.5
                xb = np.where(flip[:, None, None, None], xb[..., ::-1], xb)
            step_lr = lr * 0.5 * (1 + np.cos(np.pi * step / total))
            with GradTape() as tape:
                ps = [Tensor(p, requires_grad=True, check=False) for p in params]
                _load(c, ps)
                loss = cross_entropy(c.logits(Tensor(xb, check=False)), labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"classifier loss became non-finite in epoch {ep + 1}")
            g = backward(loss, tape)
            for j, p in enumerate(ps):
                grad = g[p] + weight_decay * params[j]
                vel[j] = momentum * vel[j] + grad
                params[j] = params[j] - step_lr * vel[j]
            run_loss += loss.item() * len(idx)
            step += 1
        _load(c, params)
        entry = {"epoch": ep + 1, "loss": run_loss / len(x)}
        if test is not None:
            entry["test_acc"] = accuracy(c, *test)
        history.append(entry)
        log.info("classifier epoch %d: %s", ep + 1, entry)
    _load(c, [p.astype(np.float32).astype(np.float64) for p in (params if epochs else c.params())])
    c.metadata.update({
        "seed": seed if isinstance(seed, int) else None, "epochs": epochs, "lr": lr,
        "batch_size": batch_size, "momentum": momentum, "weight_decay": weight_decay,
        "history": history, "train_acc": accuracy(c, x, labels),
    })
    if test is not None:
        c.metadata["test_acc"] = accuracy(c, *test)
    return c


def _load(c: ClassifierState, params: list) -> None:
    it = iter(params)
    c.convs = [(next(it), next(it), s) for (_, _, s) in c.convs]
    c.head = (next(it), next(it))
