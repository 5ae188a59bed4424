"""Symmetric uniform fake quantization with straight-through gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import Tensor, conv2d, record

SUPPORTED_BITS = (4, 6, 8, 12, 16)


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    scheme: str = "symmetric-uniform"

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.scheme != "symmetric-uniform":
            raise ValueError(f"unsupported quantization scheme {self.scheme!r}")

    @property
    def levels(self) -> int:
        return 2 ** (self.bits - 1) - 1


def _bits(spec) -> int:
    bits = spec.bits if isinstance(spec, QuantSpec) else int(spec)
    if bits < 2:
        raise ValueError(f"need at least 2 bits, got {bits}")
    return bits


def scale_for(a: np.ndarray, bits: int) -> float:
    """Per-tensor scale max|a| / (2^(bits-1) - 1); 0.0 for an all-zero tensor."""
    return float(np.max(np.abs(a))) / (2 ** (bits - 1) - 1) if a.size else 0.0


def quantize_array(a: np.ndarray, bits: int, axis: Optional[int] = None) -> np.ndarray:
    """Round onto the symmetric grid.

    With ``axis=None`` one scale covers the whole array; with ``axis=0`` each
    leading slice (sample) gets its own scale. The element(s) of largest
    magnitude map exactly onto themselves, so max-abs is preserved.
    """
    a = np.asarray(a, dtype=np.float64)
    qmax = 2 ** (bits - 1) - 1
    if axis is None:
        m = np.max(np.abs(a)) if a.size else 0.0
        if m == 0:
            return a.copy()
        m = np.asarray(m)
    else:
        red = tuple(i for i in range(a.ndim) if i != axis)
        m = np.max(np.abs(a), axis=red, keepdims=True)
    s = m / qmax
    safe = np.where(s > 0, s, 1.0)
    lv = np.round(a / safe)
    out = np.where(s > 0, lv * safe, a)
    # pin the extreme levels to the exact max-abs value
    top = np.abs(lv) == qmax
    out = np.where(top & (s > 0), np.sign(lv) * m, out)
    return out


def quantize_tensor(t, spec, axis: Optional[int] = None):
    """Quantize a Tensor (differentiable, straight-through) or a plain array."""
    bits = _bits(spec)
    if not isinstance(t, Tensor):
        return quantize_array(t, bits, axis)
    q = quantize_array(t.data, bits, axis)
    # grid range covers [-max|t|, max|t|], so every element is in range and the
    # straight-through gradient is the identity
    return record(q, (t,), lambda g, needs: (g,))


def quantized_forward(weight: Tensor, x: Tensor, spec, stride: int = 1, padding: int = 0,
                      quantize_activations: bool = True) -> Tensor:
    """Pre-activation conv output with quantized weights (per tensor) and
    quantized input activations (per sample). ``spec=None`` means full precision."""
    if spec is None:
        return conv2d(x, weight, stride=stride, padding=padding)
    wq = quantize_tensor(weight, spec)
    xq = quantize_tensor(x, spec, axis=0) if quantize_activations else x
    return conv2d(xq, wq, stride=stride, padding=padding)
