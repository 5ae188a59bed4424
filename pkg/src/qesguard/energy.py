"""Analytic energy accounting for the edge detector and the edge-to-cloud link.

All arithmetic is exact (``fractions.Fraction``): per-op energies are decimal
constants in pJ, transmission energies in mJ, and access counts are integers.
Reports convert to float only for display.

Counting model (row-stationary PE array, 16-bit words for all memory traffic):

* N_MAC = C_out * H_out * W_out * C_in * K^2
* N_ACC = C_out * H_out * W_out   (energy-computation engine sums every output)
* R_D   = input words of layer 1 only (weights are fetched once per session)
* R_C   = input-activation words * K + weight words + output words
* R_S   = 3 * N_MAC (two operand reads and one partial-sum access per MAC)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from typing import Iterable, Optional, Sequence

PJ = Fraction(1, 10**12)
MJ = Fraction(1, 10**3)


def _frac(v) -> Fraction:
    return v if isinstance(v, Fraction) else Fraction(str(v))


@dataclass(frozen=True)
class HardwareProfile:
    e_mac_pj: dict
    e_acc_pj: dict
    e_dram_pj: Fraction
    e_cache_pj: Fraction
    e_spad_pj: Fraction
    e_transmit_mj: Fraction
    pe_array_size: int = 32
    word_bits: int = 16
    amortize_weights: bool = True
    include_weight_dram: bool = False
    name: str = "custom"

    def __post_init__(self):
        tables = (self.e_mac_pj, self.e_acc_pj)
        for t in tables:
            missing = {4, 6, 8, 12, 16} - set(t)
            if missing:
                raise ValueError(f"per-precision table missing bit widths {sorted(missing)}")
        vals = [*self.e_mac_pj.values(), *self.e_acc_pj.values(), self.e_dram_pj,
                self.e_cache_pj, self.e_spad_pj, self.e_transmit_mj]
        if any(v <= 0 for v in vals):
            raise ValueError("all energy constants must be positive")

    def mac(self, bits: int) -> Fraction:
        try:
            return self.e_mac_pj[bits]
        except KeyError:
            raise ValueError(f"no MAC energy for {bits}-bit precision") from None

    def acc(self, bits: int) -> Fraction:
        try:
            return self.e_acc_pj[bits]
        except KeyError:
            raise ValueError(f"no ACC energy for {bits}-bit precision") from None

    @classmethod
    def from_dict(cls, d: dict, dataset: Optional[str] = None) -> "HardwareProfile":
        tx = d["e_transmit_mj"]
        if isinstance(tx, dict):
            key = (dataset or d.get("default_dataset", "cifar10")).lower()
            if key not in tx:
                raise ValueError(f"no transmit energy for dataset {key!r}; have {sorted(tx)}")
            tx = tx[key]
        return cls(
            e_mac_pj={int(k): _frac(v) for k, v in d["e_mac_pj"].items()},
            e_acc_pj={int(k): _frac(v) for k, v in d["e_acc_pj"].items()},
            e_dram_pj=_frac(d["e_dram_pj"]),
            e_cache_pj=_frac(d["e_cache_pj"]),
            e_spad_pj=_frac(d["e_spad_pj"]),
            e_transmit_mj=_frac(tx),
            pe_array_size=int(d.get("pe_array_size", 32)),
            word_bits=int(d.get("word_bits", 16)),
            amortize_weights=bool(d.get("amortize_weights", True)),
            include_weight_dram=bool(d.get("include_weight_dram", False)),
            name=d.get("name", "custom"),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "e_mac_pj": {str(k): str(v) for k, v in sorted(self.e_mac_pj.items())},
            "e_acc_pj": {str(k): str(v) for k, v in sorted(self.e_acc_pj.items())},
            "e_dram_pj": str(self.e_dram_pj),
            "e_cache_pj": str(self.e_cache_pj),
            "e_spad_pj": str(self.e_spad_pj),
            "e_transmit_mj": str(self.e_transmit_mj),
            "pe_array_size": self.pe_array_size,
            "word_bits": self.word_bits,
            "amortize_weights": self.amortize_weights,
            "include_weight_dram": self.include_weight_dram,
        }


def default_profile(dataset: str = "cifar10", **overrides) -> HardwareProfile:
    """The shipped 45nm profile; ``dataset`` picks the per-image transmit energy."""
    text = resources.files("qesguard.data").joinpath("edge45nm_profile.json").read_text()
    prof = HardwareProfile.from_dict(json.loads(text), dataset=dataset)
    return replace(prof, **overrides) if overrides else prof


def load_profile(path, dataset: Optional[str] = None) -> HardwareProfile:
    with open(path) as fh:
        return HardwareProfile.from_dict(json.load(fh), dataset=dataset)


@dataclass(frozen=True)
class AccessCounts:
    r_dram: int = 0
    r_cache: int = 0
    r_spad: int = 0
    n_mac: int = 0
    n_acc: int = 0

    def __post_init__(self):
        if min(self.r_dram, self.r_cache, self.r_spad, self.n_mac, self.n_acc) < 0:
            raise ValueError("access counts must be non-negative")

    def __add__(self, other: "AccessCounts") -> "AccessCounts":
        return AccessCounts(self.r_dram + other.r_dram, self.r_cache + other.r_cache,
                            self.r_spad + other.r_spad, self.n_mac + other.n_mac,
                            self.n_acc + other.n_acc)

    def as_dict(self) -> dict:
        return {"R_D": self.r_dram, "R_C": self.r_cache, "R_S": self.r_spad,
                "N_MAC": self.n_mac, "N_ACC": self.n_acc}

    @classmethod
    def from_dict(cls, d: dict) -> "AccessCounts":
        return cls(d["R_D"], d["R_C"], d["R_S"], d["N_MAC"], d["N_ACC"])


def count_layer(in_channels: int, out_channels: int, kernel: int, stride: int, padding: int,
                in_height: int, in_width: int, first_layer: bool) -> AccessCounts:
    if min(in_channels, out_channels, kernel, stride) < 1:
        raise ValueError("channels, kernel and stride must be >= 1")
    ho = (in_height + 2 * padding - kernel) // stride + 1
    wo = (in_width + 2 * padding - kernel) // stride + 1
    outputs = out_channels * ho * wo
    n_mac = outputs * in_channels * kernel * kernel
    in_words = in_channels * in_height * in_width
    weight_words = out_channels * in_channels * kernel * kernel
    return AccessCounts(
        r_dram=in_words if first_layer else 0,
        r_cache=in_words * kernel + weight_words + outputs,
        r_spad=3 * n_mac,
        n_mac=n_mac,
        n_acc=outputs,
    )


def network_counts(layers: Sequence, input_shape: tuple) -> list:
    """Per-layer counts for a detector spec's layer list on a (C, H, W) input."""
    c, h, w = input_shape
    out = []
    for i, layer in enumerate(layers):
        if layer.in_channels != c:
            raise ValueError(f"layer {i + 1} expects {layer.in_channels} channels, got {c}")
        out.append(count_layer(layer.in_channels, layer.out_channels, layer.kernel, layer.stride,
                               layer.padding, h, w, first_layer=(i == 0)))
        h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        c = layer.out_channels
    return out


def counts_energy_pj(counts: AccessCounts, profile: HardwareProfile, bits: int) -> Fraction:
    return (profile.e_dram_pj * counts.r_dram + profile.e_cache_pj * counts.r_cache
            + profile.e_spad_pj * counts.r_spad + profile.mac(bits) * counts.n_mac
            + profile.acc(bits) * counts.n_acc)


def _component_pj(counts: AccessCounts, profile: HardwareProfile, bits: int) -> dict:
    return {
        "dram": profile.e_dram_pj * counts.r_dram,
        "cache": profile.e_cache_pj * counts.r_cache,
        "spad": profile.e_spad_pj * counts.r_spad,
        "mac": profile.mac(bits) * counts.n_mac,
        "acc": profile.acc(bits) * counts.n_acc,
    }


def _outcome_counts(outcome) -> list:
    return outcome.layer_counts if hasattr(outcome, "layer_counts") else list(outcome)


def detection_energy(outcomes: Iterable, profile: HardwareProfile, bits: int,
                     weight_words: int = 0) -> Fraction:
    """E_D in joules, summed over samples with counts truncated at each exit layer.

    ``weight_words`` is the detector's total weight count; it is charged at DRAM
    cost once per session when ``include_weight_dram`` is set, or once per
    executed layer per sample when weights are not amortized.
    """
    return sum(detection_breakdown(outcomes, profile, bits, weight_words).values(), Fraction(0))


def detection_breakdown(outcomes: Iterable, profile: HardwareProfile, bits: int,
                        weight_words: int = 0) -> dict:
    profile.mac(bits), profile.acc(bits)  # validate before touching outcomes
    parts = {k: Fraction(0) for k in ("dram", "cache", "spad", "mac", "acc", "weight_dram")}
    for o in outcomes:
        for c in _outcome_counts(o):
            for k, v in _component_pj(c, profile, bits).items():
                parts[k] += v
        if not profile.amortize_weights:
            per_layer = getattr(o, "layer_weight_words", None) or []
            parts["weight_dram"] += profile.e_dram_pj * sum(per_layer)
    if profile.include_weight_dram and profile.amortize_weights:
        parts["weight_dram"] += profile.e_dram_pj * weight_words
    return {k: v * PJ for k, v in parts.items()}


def transmission_energy(n_nat: int, n_adv: int, p, q, profile: HardwareProfile) -> tuple:
    """(E_T,N, E_T,A) in joules."""
    p, q = _frac(p), _frac(q)
    if not (0 <= p <= 1 and 0 <= q <= 1):
        raise ValueError(f"fractions must lie in [0, 1], got p={p}, q={q}")
    per_image = profile.e_transmit_mj * MJ
    return p * n_nat * per_image, q * n_adv * per_image


@dataclass
class EnergyReport:
    e_tn: Fraction
    e_ta: Fraction
    e_d: Fraction
    p: Fraction
    q: Fraction
    n_nat: int
    n_adv: int
    bits: Optional[int]
    breakdown: dict = field(default_factory=dict)
    mode: str = "detector"

    @property
    def total(self) -> Fraction:
        return self.e_tn + self.e_ta + self.e_d

    def as_dict(self) -> dict:
        def j(x):
            return {"joules": float(x), "exact": str(x)}
        return {
            "mode": self.mode,
            "bits": self.bits,
            "N_nat": self.n_nat,
            "N_adv": self.n_adv,
            "p": {"value": float(self.p), "exact": str(self.p)},
            "q": {"value": float(self.q), "exact": str(self.q)},
            "E_TN": j(self.e_tn),
            "E_TA": j(self.e_ta),
            "E_D": j(self.e_d),
            "E": j(self.total),
            "E_D_breakdown": {k: j(v) for k, v in self.breakdown.items()},
        }


def report(outcomes_nat: Sequence, outcomes_adv: Sequence, profile: HardwareProfile, bits: int,
           weight_words: int = 0) -> EnergyReport:
    """System energy with the detector at the edge.

    p and q are the fractions of natural and adversarial samples the detector
    lets through (verdict natural).
    """
    if not outcomes_nat and not outcomes_adv:
        raise ValueError("no outcomes to report on")
    n_nat, n_adv = len(outcomes_nat), len(outcomes_adv)
    p = Fraction(sum(o.verdict == "natural" for o in outcomes_nat), n_nat) if n_nat else Fraction(0)
    q = Fraction(sum(o.verdict == "natural" for o in outcomes_adv), n_adv) if n_adv else Fraction(0)
    e_tn, e_ta = transmission_energy(n_nat, n_adv, p, q, profile)
    parts = detection_breakdown(list(outcomes_nat) + list(outcomes_adv), profile, bits, weight_words)
    e_d = sum(parts.values(), Fraction(0))
    return EnergyReport(e_tn, e_ta, e_d, p, q, n_nat, n_adv, bits, parts)


def baseline_report(n_nat: int, n_adv: int, profile: HardwareProfile) -> EnergyReport:
    """No detector anywhere: everything is transmitted and nothing is spent on detection."""
    e_tn, e_ta = transmission_energy(n_nat, n_adv, 1, 1, profile)
    return EnergyReport(e_tn, e_ta, Fraction(0), Fraction(1), Fraction(1), n_nat, n_adv, None,
                        {}, mode="baseline")
