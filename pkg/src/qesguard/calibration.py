"""Confidence boundaries from natural-sample energy distributions."""
from __future__ import annotations

import hashlib
import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .detector import DetectorState, all_energies


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyDistribution:
    layer: int
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.size == 0:
            raise CalibrationError("energy distribution is empty")
        object.__setattr__(self, "samples", np.sort(s))


def percentile(dist, p: float) -> float:
    """Nearest-rank percentile: the value at 1-based rank ceil(p/100 * N); p=0 gives the minimum."""
    values = dist.samples if isinstance(dist, EnergyDistribution) else np.sort(np.asarray(dist, dtype=np.float64))
    if values.size == 0:
        raise CalibrationError("percentile of an empty distribution")
    if not 0 <= p <= 100:
        raise CalibrationError(f"percentile must be in [0, 100], got {p}")
    # exact rational rank avoids float drift at integer boundaries
    rank = math.ceil(Fraction(str(p)) * values.size / 100)
    return float(values[max(rank, 1) - 1])


def check_klu(k: float, l: float, u: float) -> None:
    if k - l < 0 or k + u > 100 or l < 0 or u < 0 or not 0 <= k <= 100:
        raise CalibrationError(f"need 0 <= K-L and K+U <= 100 with L, U >= 0; got K={k}, L={l}, U={u}")


@dataclass
class BoundarySet:
    lower: list  # E_{i,L} for i < n
    upper: list  # E_{i,U} for i < n
    threshold: float  # E_{n,Th}
    k: float
    l: float
    u: float
    detector_fingerprint: str
    sample_fingerprint: str
    sample_count: int
    transform: str = "none"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        check_klu(self.k, self.l, self.u)
        if len(self.lower) != len(self.upper):
            raise CalibrationError("lower and upper boundary lists differ in length")
        for i, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            if lo > hi:
                raise CalibrationError(f"layer {i + 1}: lower boundary {lo} > upper boundary {hi}")

    @property
    def n_layers(self) -> int:
        return len(self.lower) + 1

    def as_dict(self) -> dict:
        return {
            "format": "qesguard-boundaries/1",
            "K": self.k, "L": self.l, "U": self.u,
            "layers": [{"layer": i + 1, "E_L": lo, "E_U": hi} for i, (lo, hi) in enumerate(zip(self.lower, self.upper))],
            "final": {"layer": self.n_layers, "E_Th": self.threshold},
            "detector_fingerprint": self.detector_fingerprint,
            "sample_fingerprint": self.sample_fingerprint,
            "sample_count": self.sample_count,
            "transform": self.transform,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundarySet":
        return cls(
            lower=[float(x["E_L"]) for x in d["layers"]],
            upper=[float(x["E_U"]) for x in d["layers"]],
            threshold=float(d["final"]["E_Th"]),
            k=d["K"], l=d["L"], u=d["U"],
            detector_fingerprint=d["detector_fingerprint"],
            sample_fingerprint=d["sample_fingerprint"],
            sample_count=int(d["sample_count"]),
            transform=d.get("transform", "none"),
            provenance=d.get("provenance", {}),
        )


def data_fingerprint(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).hexdigest()


def boundaries_from_energies(energies: np.ndarray, k: float, l: float, u: float,
                             detector_fingerprint: str = "", sample_fingerprint: str = "",
                             transform: str = "none") -> BoundarySet:
    """Boundaries from a (N, n_layers) matrix of natural per-sample energies."""
    check_klu(k, l, u)
    energies = np.asarray(energies, dtype=np.float64)
    if energies.ndim != 2 or energies.shape[0] == 0:
        raise CalibrationError("need a non-empty (samples, layers) energy matrix")
    n = energies.shape[1]
    dists = [EnergyDistribution(i + 1, energies[:, i]) for i in range(n)]
    lower = [percentile(dists[i], k - l) for i in range(n - 1)]
    upper = [percentile(dists[i], k + u) for i in range(n - 1)]
    thr = percentile(dists[-1], k)
    return BoundarySet(lower, upper, thr, k, l, u, detector_fingerprint, sample_fingerprint,
                       energies.shape[0], transform)


def generate_boundaries(d: DetectorState, s_nat, k: float = 92, l: float = 30, u: float = 5,
                        transform: str = "none") -> BoundarySet:
    """Full-depth energies of the calibration naturals (no early exit), then percentiles."""
    check_klu(k, l, u)
    x = np.asarray(getattr(s_nat, "data", s_nat), dtype=np.float64)
    if x.ndim != 4 or x.shape[0] == 0:
        raise CalibrationError("calibration sample set is empty or not (N, C, H, W)")
    if tuple(x.shape[1:]) != tuple(d.spec.input_shape):
        raise CalibrationError(f"calibration samples {x.shape[1:]} do not match detector input "
                               f"{d.spec.input_shape}; resize with fit_to_input first")
    e = all_energies(d, x)
    return boundaries_from_energies(e, k, l, u, d.fingerprint(), data_fingerprint(x), transform)


def fit_to_input(x: np.ndarray, shape: tuple) -> tuple:
    """Center-pad with zeros or center-crop (N, C, H, W) images to (C, H', W').

    Returns (images, transform description).
    """
    x = np.asarray(x, dtype=np.float64)
    c, h, w = shape
    if x.shape[1] != c:
        if x.shape[1] == 1 and c == 3:
            x = np.repeat(x, 3, axis=1)
        else:
            raise CalibrationError(f"cannot map {x.shape[1]} channels onto {c}")
    ops = []
    for axis, target in ((2, h), (3, w)):
        cur = x.shape[axis]
        if cur < target:
            before = (target - cur) // 2
            pad = [(0, 0)] * 4
            pad[axis] = (before, target - cur - before)
            x = np.pad(x, pad)
            ops.append(f"pad{'HW'[axis - 2]}{cur}->{target}")
        elif cur > target:
            start = (cur - target) // 2
            x = np.take(x, np.arange(start, start + target), axis=axis)
            ops.append(f"crop{'HW'[axis - 2]}{cur}->{target}")
    return x, ("center:" + ",".join(ops)) if ops else "none"


def recalibrate_for_transfer(d: DetectorState, s_nat_target, k: float = 92, l: float = 30,
                             u: float = 5) -> BoundarySet:
    """Boundaries recomputed on target-domain naturals; detector weights untouched."""
    x = np.asarray(getattr(s_nat_target, "data", s_nat_target), dtype=np.float64)
    x, transform = fit_to_input(x, d.spec.input_shape)
    return generate_boundaries(d, x, k, l, u, transform=transform)
