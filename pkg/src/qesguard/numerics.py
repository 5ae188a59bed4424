"""Small dense-tensor core with tape-based reverse-mode gradients.

Only the handful of ops needed by the detector, the classifier and the
attacks are provided. Everything is float64 numpy underneath.

Usage::

    with GradTape() as tape:
        x = Tensor(images, requires_grad=True)
        loss = mean(relu(conv2d(x, w, stride=2, padding=1)))
    grads = backward(loss, tape)
    grads[x]  # ndarray shaped like x
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable n-d array, optionally tracked for gradients.

    Activations and images are 4-D (batch, channels, height, width).
    """

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, check: bool = True):
        arr = np.asarray(data, dtype=DTYPE)
        if check and not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains NaN or Inf")
        arr = arr.view()  # freeze a view, never the caller's array
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, check=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, check=False)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class GradTape:
    """Records ops on tracked tensors while active (use as a context manager)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Optional[GradTape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed.

    ``vjp(g, needs)`` receives the upstream gradient and a tuple of flags
    saying which inputs need a gradient; it returns one array (or None) per
    input.
    """
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, check=False)
    if track:
        tape.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


class Gradients(dict):
    """Maps tracked tensors to gradient arrays; missing tensors get zeros."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros(key.shape, dtype=DTYPE)


def backward(loss: Tensor, tape: GradTape) -> Gradients:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = Gradients()
    if not loss.requires_grad:
        return grads
    grads[loss] = np.ones(loss.shape, dtype=DTYPE)
    for node in reversed(tape.nodes):
        g = grads.get(node.out)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        for t, gi in zip(node.inputs, node.vjp(g, needs)):
            if gi is None or not t.requires_grad:
                continue
            if t in grads:
                grads[t] = grads[t] + gi
            else:
                grads[t] = gi
    return grads


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix laid out (C, K, K, N, Ho, Wo); each tap is one strided slice."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """2-D cross-correlation. weight is (out_ch, in_ch, k, k)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (N,C,H,W), got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d kernel must be (O,C,K,K), got shape {weight.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    n, c, h, w = x.shape
    o, ck, k, _ = weight.shape
    if ck != c:
        raise ShapeError(f"kernel expects {ck} input channels but input has {c} channels")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} with padding {padding} does not fit input {h}x{w}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo).reshape(c * k * k, n * ho * wo)
    wmat = weight.data.reshape(o, c * k * k)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g, needs):
        gx = gw = gb = None
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        if needs[1]:
            gw = (gmat @ cols.T).reshape(weight.shape)
        if needs[0]:
            gcols = (wmat.T @ gmat).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        if bias is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(out, inputs, vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (N, F) @ weight.T (F, O) + bias."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g, needs):
        gx = g @ weight.data if needs[0] else None
        gw = g.T @ x.data if needs[1] else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if needs[2] else None)

    return record(out, inputs, vjp)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = a.data - b.data

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                -_unbroadcast(g, b.shape) if needs[1] else None)

    return record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data

    def vjp(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return record(out, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    return record(x.data * c, (x,), lambda g, needs: (g * c,))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum(), dtype=DTYPE).reshape(shape)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g, needs: (g * mask,))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return record(np.abs(x.data), (x,), lambda g, needs: (g * s,))


def square(x: Tensor) -> Tensor:
    return record(x.data ** 2, (x,), lambda g, needs: (2.0 * g * x.data,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return record(t, (x,), lambda g, needs: (g * (1.0 - t * t),))


def sign(x) -> np.ndarray:
    """Elementwise sign; not differentiable, returns a plain array."""
    return np.sign(x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE))


def clamp(x, lo: float, hi: float):
    """Clamp into [lo, hi]. Tensors get a pass-through gradient inside the range."""
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    if not isinstance(x, Tensor):
        return np.clip(np.asarray(x, dtype=DTYPE), lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return record(np.clip(x.data, lo, hi), (x,), lambda g, needs: (g * inside,))


def l2_norm(x, axis=None) -> np.ndarray:
    d = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    return np.sqrt(np.sum(d * d, axis=axis))


def linf_norm(x, axis=None) -> np.ndarray:
    d = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    return np.max(np.abs(d), axis=axis)


def gaussian_noise(shape: tuple, sigma: float, seed=None) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.normal(0.0, 1.0, size=shape) * sigma


# ---------------------------------------------------------------------------
# reductions and shape ops


def mean(x: Tensor, axis=None) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    out = x.data.mean(axis=axis)
    axes = tuple(range(x.ndim)) if axis is None else ((axis,) if isinstance(axis, int) else tuple(axis))
    count = int(np.prod([x.shape[a] for a in axes]))

    def vjp(g, needs):
        g = np.asarray(g)
        return (np.broadcast_to(np.expand_dims(g, axes) if axis is not None else g, x.shape) / count,)

    return record(out, (x,), vjp)


def sum_(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)
    axes = tuple(range(x.ndim)) if axis is None else ((axis,) if isinstance(axis, int) else tuple(axis))

    def vjp(g, needs):
        g = np.asarray(g)
        return (np.broadcast_to(np.expand_dims(g, axes) if axis is not None else g, x.shape).copy(),)

    return record(out, (x,), vjp)


def max_(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient routed to the first argmax."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def vjp(g, needs):
        gx = np.zeros(x.shape, dtype=DTYPE)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (gx,)

    return record(out, (x,), vjp)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return record(x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(x.shape),))


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    h, w = x.shape[2], x.shape[3]
    return record(out, (x,), lambda g, needs: (g[:, :, top : top + h, left : left + w],))


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    if top < 0 or left < 0 or top + height > x.shape[2] or left + width > x.shape[3]:
        raise ShapeError(f"crop window ({top},{left},{height},{width}) outside input {x.shape}")
    out = x.data[:, :, top : top + height, left : left + width]

    def vjp(g, needs):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[:, :, top : top + height, left : left + width] = g
        return (gx,)

    return record(out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, _as_tensor(np.broadcast_to(np.asarray(target, dtype=DTYPE), pred.shape)))
    return mean(square(diff))


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g, needs):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return record(out, (logits,), vjp)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy; labels are integer class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lp = log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    onehot[np.arange(len(labels)), labels] = -1.0
    nll = sum_(mul(lp, Tensor(onehot, check=False)), axis=1)
    return mean(nll) if reduction == "mean" else sum_(nll)


# ---------------------------------------------------------------------------
# gradient checking


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=DTYPE)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = f(x)
        x[i] = orig - eps
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
