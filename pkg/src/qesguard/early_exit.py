"""Early detection and exit at inference time, with per-layer op accounting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import BoundarySet
from .detector import DetectorState, all_energies, layer_counts, layer_forward, sample_energies
from .energy import AccessCounts
from .numerics import Tensor, relu


class BoundaryMismatch(ValueError):
    pass


@dataclass
class DetectionOutcome:
    verdict: str  # "natural" | "adversarial"
    exit_layer: int  # 1-based
    energies: list  # energies of executed layers only
    layer_counts: list = field(default_factory=list)  # AccessCounts per executed layer
    layer_weight_words: list = field(default_factory=list)

    @property
    def is_adversarial(self) -> bool:
        return self.verdict == "adversarial"

    def totals(self) -> AccessCounts:
        return sum(self.layer_counts, AccessCounts())

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "exit_layer": self.exit_layer,
            "energies": [float(e) for e in self.energies],
            "layer_counts": [c.as_dict() for c in self.layer_counts],
            "layer_weight_words": list(self.layer_weight_words),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionOutcome":
        return cls(d["verdict"], int(d["exit_layer"]), list(d["energies"]),
                   [AccessCounts.from_dict(c) for c in d["layer_counts"]],
                   list(d.get("layer_weight_words", [])))


def decide(energies, b: BoundarySet, early_exit: bool = True) -> tuple:
    """(verdict, exit_layer) from a full vector of per-layer energies.

    Non-final layers: below E_L -> natural, above E_U -> adversarial, otherwise
    (ties included) continue. Final layer: above E_Th -> adversarial, else natural.
    """
    n = len(energies)
    if n != b.n_layers:
        raise BoundaryMismatch(f"boundary set covers {b.n_layers} layers, detector has {n}")
    if early_exit:
        for i in range(n - 1):
            e = energies[i]
            if e < b.lower[i]:
                return "natural", i + 1
            if e > b.upper[i]:
                return "adversarial", i + 1
    return ("adversarial" if energies[-1] > b.threshold else "natural"), n


def _check(d: DetectorState, b: BoundarySet) -> None:
    if b.detector_fingerprint != d.fingerprint():
        raise BoundaryMismatch("boundary file was calibrated for a different detector checkpoint")
    if b.n_layers != d.n_layers:
        raise BoundaryMismatch(f"boundary set covers {b.n_layers} layers, detector has {d.n_layers}")


def _outcome(d: DetectorState, energies, b: BoundarySet, counts: list, early_exit: bool) -> DetectionOutcome:
    verdict, exit_layer = decide(energies, b, early_exit)
    wwords = [int(np.size(w)) for w in d.weights[:exit_layer]]
    return DetectionOutcome(verdict, exit_layer, [float(e) for e in energies[:exit_layer]],
                            counts[:exit_layer], wwords)


def detect(d: DetectorState, b: BoundarySet, x, early_exit: bool = True) -> DetectionOutcome:
    """Single-sample detection. Layers past the exit layer are not executed."""
    _check(d, b)
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError(f"detect takes one sample, got batch of {x.shape[0]}")
    counts = layer_counts(d)
    n = d.n_layers
    energies = []
    verdict = None
    h = Tensor(x)
    for i in range(n):
        z = layer_forward(d, i, h)
        e = float(sample_energies(z).data[0])
        energies.append(e)
        if i == n - 1:
            verdict = "adversarial" if e > b.threshold else "natural"
        elif early_exit and e < b.lower[i]:
            verdict = "natural"
        elif early_exit and e > b.upper[i]:
            verdict = "adversarial"
        if verdict is not None:
            break
        h = relu(z) if d.spec.layers[i].relu_after else z
    k = len(energies)
    return DetectionOutcome(verdict, k, energies, counts[:k], [int(np.size(w)) for w in d.weights[:k]])


def detect_batch(d: DetectorState, b: BoundarySet, x, early_exit: bool = True,
                 energies: np.ndarray = None) -> list:
    """Per-sample outcomes for a batch.

    Every layer's energy depends only on its own sample, so computing the
    full-depth energies once and truncating per sample gives the same verdicts
    and counts as running ``detect`` sample by sample.
    """
    _check(d, b)
    e = all_energies(d, x) if energies is None else np.asarray(energies)
    counts = layer_counts(d)
    return [_outcome(d, row, b, counts, early_exit) for row in e]


def score(d: DetectorState, x) -> np.ndarray:
    """Continuous detection score: full-depth final-layer energy per sample."""
    return all_energies(d, x)[:, -1]
