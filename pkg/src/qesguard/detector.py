"""Detector presets, forward evaluation and the per-layer energy signature.

The energy signature of a layer is the mean magnitude of its pre-ReLU conv
outputs. Per sample it averages over (C, H, W); a batch energy is the mean of
the per-sample values.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import energy as energy_model
from .numerics import Tensor, absolute, mean, relu
from .quantization import QuantSpec, quantize_tensor, quantized_forward


@dataclass(frozen=True)
class LayerSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    relu_after: bool = True

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1 or self.padding < 0:
            raise ValueError(f"invalid layer spec {self}")


@dataclass(frozen=True)
class DetectorSpec:
    layers: tuple
    name: str = "custom"
    input_shape: tuple = (3, 32, 32)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("detector needs at least one layer")
        if self.layers[0].in_channels != self.input_shape[0]:
            raise ValueError("first layer input channels must match the input shape")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError(f"channel chaining broken: {a.out_channels} -> {b.in_channels}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def with_input_shape(self, shape: tuple) -> "DetectorSpec":
        return DetectorSpec(self.layers, self.name, tuple(shape))

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [vars(l).copy() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorSpec":
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), d.get("name", "custom"),
                   tuple(d["input_shape"]))


_PRESET_CHANNELS = {
    "D1": (3, 8, 16, 32),
    "D2": (3, 16, 32, 64),
    "D3": (3, 32, 32, 64),
}


def preset(name: str, input_shape: tuple = (3, 32, 32), depth: Optional[int] = None) -> DetectorSpec:
    """D1/D2/D3: three 3x3 stride-2 convs, ReLU after the first two.

    ``depth`` > 3 appends extra layers repeating the last width (ablation only).
    """
    try:
        ch = list(_PRESET_CHANNELS[name.upper()])
    except KeyError:
        raise ValueError(f"unknown detector preset {name!r}; choose from {sorted(_PRESET_CHANNELS)}") from None
    if depth is not None:
        if depth < 1:
            raise ValueError("depth must be >= 1")
        ch = ch[: depth + 1] + [ch[-1]] * max(0, depth + 1 - len(ch))
    n = len(ch) - 1
    layers = tuple(LayerSpec(ch[i], ch[i + 1], relu_after=(i < n - 1)) for i in range(n))
    return DetectorSpec(layers, name.upper() if depth in (None, 3) else f"{name.upper()}x{depth}",
                        tuple(input_shape))


@dataclass
class DetectorState:
    spec: DetectorSpec
    weights: list
    bits: list
    frozen: list
    quantize_activations: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.spec.n_layers
        if not (len(self.weights) == len(self.bits) == len(self.frozen) == n):
            raise ValueError("weights, bits and frozen flags must have one entry per layer")
        for i, (l, w) in enumerate(zip(self.spec.layers, self.weights)):
            exp = (l.out_channels, l.in_channels, l.kernel, l.kernel)
            if tuple(np.shape(w)) != exp:
                raise ValueError(f"layer {i + 1} weight shape {np.shape(w)} != {exp}")
        for b in self.bits:
            if b is not None:
                QuantSpec(b)

    @property
    def n_layers(self) -> int:
        return self.spec.n_layers

    def copy(self) -> "DetectorState":
        return DetectorState(self.spec, [np.array(w, dtype=np.float64) for w in self.weights],
                             list(self.bits), list(self.frozen), self.quantize_activations,
                             dict(self.metadata))

    def quant_spec(self, i: int) -> Optional[QuantSpec]:
        return None if self.bits[i] is None else QuantSpec(self.bits[i])

    def weight_count(self) -> int:
        return int(sum(np.size(w) for w in self.weights))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.spec.as_dict()).encode())
        h.update(repr(list(self.bits)).encode())
        h.update(repr(self.quantize_activations).encode())
        for w in self.weights:
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        return h.hexdigest()

    def layer_fingerprint(self, upto: int) -> str:
        h = hashlib.sha256()
        for w in self.weights[:upto]:
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        return h.hexdigest()


def to_float32_grid(a) -> np.ndarray:
    """Round onto float32-representable values (checkpoints store 32-bit weights)."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def init_detector(spec: DetectorSpec, seed=0, bits: Optional[int] = None,
                  quantize_activations: bool = True) -> DetectorState:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, no biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights = []
    for l in spec.layers:
        bound = 1.0 / np.sqrt(l.in_channels * l.kernel * l.kernel)
        w = rng.uniform(-bound, bound, size=(l.out_channels, l.in_channels, l.kernel, l.kernel))
        weights.append(to_float32_grid(w))
    n = spec.n_layers
    return DetectorState(spec, weights, [bits] * n, [False] * n, quantize_activations,
                         {"init": "uniform_fan_in"})


def sample_energies(z: Tensor) -> Tensor:
    """Per-sample energy: mean |z| over (C, H, W). Differentiable; shape (N,)."""
    if z.size == 0:
        raise ValueError("energy of an empty tensor")
    return mean(absolute(z), axis=(1, 2, 3))


def energy_signature(z: Tensor) -> Tensor:
    """Batch energy: mean |z| over batch, channels, height and width."""
    if z.size == 0:
        raise ValueError("energy of an empty tensor")
    return mean(absolute(z))


@dataclass
class LayerEnergies:
    per_sample: np.ndarray  # (N, layers computed)

    @property
    def batch(self) -> np.ndarray:
        return self.per_sample.mean(axis=0)

    def __len__(self) -> int:
        return self.per_sample.shape[1]


def layer_forward(d: DetectorState, i: int, x: Tensor, bits_override="keep") -> Tensor:
    """Pre-activation output of layer i (0-based) at the state's bit width."""
    l = d.spec.layers[i]
    bits = d.bits[i] if bits_override == "keep" else bits_override
    w = d.weights[i] if isinstance(d.weights[i], Tensor) else Tensor(d.weights[i], check=False)
    return quantized_forward(w, x, None if bits is None else QuantSpec(bits), stride=l.stride,
                             padding=l.padding, quantize_activations=d.quantize_activations)


def forward_with_energies(d: DetectorState, x, upto_layer: Optional[int] = None,
                          hook: Optional[Callable] = None):
    """Run layers 1..upto_layer, recording each layer's per-sample energy.

    Returns (LayerEnergies, list of pre-activation arrays). ``hook`` is called
    as hook(layer_index, bits) before each layer runs.
    """
    n = d.n_layers
    upto = n if upto_layer is None else upto_layer
    if not 1 <= upto <= n:
        raise ValueError(f"upto_layer must be in [1, {n}], got {upto}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or tuple(x.shape[1:2]) != (d.spec.input_shape[0],):
        raise ValueError(f"input shape {x.shape} does not match detector input {d.spec.input_shape}")
    energies, pre = [], []
    h = x
    for i in range(upto):
        if hook is not None:
            hook(i, d.bits[i])
        z = layer_forward(d, i, h)
        energies.append(sample_energies(z).data)
        pre.append(z.data)
        h = relu(z) if d.spec.layers[i].relu_after else z
    return LayerEnergies(np.stack(energies, axis=1)), pre


def all_energies(d: DetectorState, x, batch_size: int = 500) -> np.ndarray:
    """Full-depth per-sample energies, (N, n_layers), computed in chunks."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    out = [forward_with_energies(d, Tensor(x[s : s + batch_size], check=False))[0].per_sample
           for s in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, d.n_layers))


def layer_counts(d: DetectorState) -> list:
    return energy_model.network_counts(d.spec.layers, d.spec.input_shape)


def model_info(d: DetectorState) -> dict:
    """Size and compute footprint; weight bytes at the configured bit width."""
    counts = layer_counts(d)
    n_w = d.weight_count()
    bits = [b if b is not None else 32 for b in d.bits]
    wbytes = sum(np.size(w) * b / 8 for w, b in zip(d.weights, bits))
    return {
        "preset": d.spec.name,
        "input_shape": list(d.spec.input_shape),
        "layers": d.n_layers,
        "parameters": n_w,
        "weight_bytes": wbytes,
        "weight_bytes_fp32": n_w * 4,
        "reference_weight_bytes": 12 * 1024,
        "n_mac_full": sum(c.n_mac for c in counts),
        "n_acc_full": sum(c.n_acc for c in counts),
        "per_layer": [c.as_dict() for c in counts],
    }


def quantize_weights(d: DetectorState) -> DetectorState:
    """Bake the per-layer weight quantization into the stored weights."""
    out = d.copy()
    out.weights = [w if b is None else quantize_tensor(np.asarray(w), b) for w, b in zip(d.weights, d.bits)]
    return out
