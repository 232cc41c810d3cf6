"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (row-major, channel-last for images) and record
the producing operation so that ``backward`` on a scalar fills the ``grad``
of every leaf that requires it.  Only the operations the recognition model
needs are provided; there is no broadcasting magic beyond what the model
uses (trailing-axis alignment, numpy rules).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_default_dtype = np.float64
_grad_enabled = True

CONVOLUTIONAL = "convolutional"
NON_CONVOLUTIONAL = "non_convolutional"


def set_default_dtype(dtype) -> None:
    """Select float64 (gradient-check builds) or float32 (training builds)."""
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    global _default_dtype
    _default_dtype = dt.type


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional real array, optionally part of a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray, dict], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray, dict], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into the grad of every reachable leaf.

        ``self`` must be a scalar.  Repeated calls keep accumulating; leaves
        never reached by this root are left untouched (grad stays None).
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar root, got shape {self.shape}")
        topo = self._toposort()
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            node._backward(g, grads)

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        return order

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, -1.0)

    def __sub__(self, other):
        return add(self, multiply(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(multiply(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, power(other, -1.0))
        return multiply(self, 1.0 / _as_array(other))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self):
        return absolute(self)


@dataclass
class Parameter:
    """Named trainable tensor.

    ``layer_kind`` controls membership in the weight regularizer: values
    tagged ``convolutional`` (encoder kernels, batchnorm affines, the
    attention-history filters) are excluded from it.
    """

    name: str
    tensor: Tensor
    layer_kind: str = NON_CONVOLUTIONAL

    def __post_init__(self):
        if self.layer_kind not in (CONVOLUTIONAL, NON_CONVOLUTIONAL):
            raise ValueError(f"unknown layer_kind {self.layer_kind!r}")
        self.tensor.requires_grad = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


# -- helpers ------------------------------------------------------------------


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=_default_dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(grads: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


# -- elementwise and linear algebra -------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g, grads):
        _accum(grads, a, _unbroadcast(g, a.data.shape))
        _accum(grads, b, _unbroadcast(g, b.data.shape))

    return Tensor._from_op(out, (a, b), backward)


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g, grads):
        _accum(grads, a, _unbroadcast(g * b.data, a.data.shape))
        _accum(grads, b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out, (a, b), backward)


def power(a, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = a.data ** p

    def backward(g, grads):
        _accum(grads, a, g * p * a.data ** (p - 1.0))

    return Tensor._from_op(out, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix/vector product for 2-D @ 2-D, 2-D @ 1-D and 1-D @ 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1):
        raise ValueError(f"matmul supports matrix operands, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g, grads):
        if a.ndim == 2 and b.ndim == 2:
            _accum(grads, a, g @ b.data.T)
            _accum(grads, b, a.data.T @ g)
        elif a.ndim == 2:  # (M,K) @ (K,) -> (M,)
            _accum(grads, a, np.outer(g, b.data))
            _accum(grads, b, a.data.T @ g)
        else:  # (K,) @ (K,N) -> (N,)
            _accum(grads, a, b.data @ g)
            _accum(grads, b, np.outer(a.data, g))

    return Tensor._from_op(out, (a, b), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, grads):
        if not a.requires_grad:
            return
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            gg = np.expand_dims(gg, axes)
        _accum(grads, a, np.broadcast_to(gg, a.data.shape))

    return Tensor._from_op(np.asarray(out), (a,), backward)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    out = np.abs(a.data)

    def backward(g, grads):
        _accum(grads, a, g * np.sign(a.data))

    return Tensor._from_op(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # evaluate on the safe side of the exponent to avoid overflow warnings
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g, grads):
        _accum(grads, a, g * out * (1.0 - out))

    return Tensor._from_op(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g, grads):
        _accum(grads, a, g * (1.0 - out * out))

    return Tensor._from_op(out, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g, grads):
        _accum(grads, a, g * (a.data > 0.0))

    return Tensor._from_op(out, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def backward(g, grads):
        _accum(grads, a, g / a.data)

    return Tensor._from_op(out, (a,), backward)


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo) elementwise; gradient passes through where a >= lo."""
    a = _as_tensor(a)
    lo = float(lo)
    out = np.maximum(a.data, lo)

    def backward(g, grads):
        _accum(grads, a, g * (a.data >= lo))

    return Tensor._from_op(out, (a,), backward)


def softmax(a) -> Tensor:
    """Probability vector over a 1-D tensor, stabilized by max subtraction."""
    a = _as_tensor(a)
    if a.ndim != 1 or a.size < 1:
        raise ValueError(f"softmax expects a nonempty 1-D tensor, got shape {a.shape}")
    shifted = a.data - a.data.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def backward(g, grads):
        _accum(grads, a, out * (g - float(np.dot(g, out))))

    return Tensor._from_op(out, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along an axis (depth-wise by default)."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [t.data.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g, grads):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            _accum(grads, t, g[tuple(sl)])

    return Tensor._from_op(out, ts, backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g, grads):
        _accum(grads, a, g.reshape(a.data.shape))

    return Tensor._from_op(out, (a,), backward)


def take(a, idx) -> Tensor:
    """Indexing/slicing with scatter-add gradient."""
    a = _as_tensor(a)
    out = a.data[idx]

    def backward(g, grads):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(grads, a, buf)

    return Tensor._from_op(np.asarray(out), (a,), backward)


# -- image-shaped operations ---------------------------------------------------


def _conv_geometry(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """(out_size, pad_before, pad_after) for one spatial axis."""
    if padding == "same":
        out = -(-size // stride)
        need = max((out - 1) * stride + k - size, 0)
        before = need // 2
        return out, before, need - before
    if padding == "valid":
        if k > size:
            raise ValueError(f"kernel extent {k} exceeds input extent {size}")
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x, kernels, stride: tuple[int, int] = (1, 1), padding: str = "same") -> Tensor:
    """2-D cross-correlation of an h*w*c_in input with f_h*f_w*c_in*c_out kernels."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise ValueError(
            f"conv2d expects input h*w*c_in and kernels f_h*f_w*c_in*c_out, "
            f"got {x.shape} and {kernels.shape}")
    fh, fw, cin_k, cout = kernels.shape
    h, w, cin = x.shape
    if cin != cin_k:
        raise ValueError(
            f"channel mismatch: input has shape {x.shape} (c_in={cin}) but "
            f"kernels have shape {kernels.shape} (c_in={cin_k})")
    sh, sw = stride
    oh, pt, pb = _conv_geometry(h, fh, sh, padding)
    ow, pl, pr = _conv_geometry(w, fw, sw, padding)

    xp = np.pad(x.data, ((pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (fh, fw), axis=(0, 1))[::sh, ::sw]
    # (oh, ow, c_in, fh, fw) -> rows ordered (fh, fw, c_in) to match the kernel layout
    patches = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(oh * ow, fh * fw * cin)
    kmat = kernels.data.reshape(fh * fw * cin, cout)
    out = (patches @ kmat).reshape(oh, ow, cout)

    def backward(g, grads):
        gf = g.reshape(oh * ow, cout)
        if kernels.requires_grad:
            _accum(grads, kernels, (patches.T @ gf).reshape(kernels.data.shape))
        if x.requires_grad:
            cols = (gf @ kmat.T).reshape(oh, ow, fh, fw, cin)
            dxp = np.zeros_like(xp)
            for i in range(fh):
                for j in range(fw):
                    dxp[i:i + sh * oh:sh, j:j + sw * ow:sw, :] += cols[:, :, i, j, :]
            _accum(grads, x, dxp[pt:pt + h, pl:pl + w, :])

    return Tensor._from_op(out, (x, kernels), backward)


def pool2d(x, mode: str = "max") -> Tensor:
    """2*2 window, stride-2 pooling; spatial extents floor-halve."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"pool2d expects h*w*c input, got shape {x.shape}")
    h, w, c = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"pooling window 2*2 larger than input {h}*{w}")
    if mode not in ("max", "avg"):
        raise ValueError(f"pool mode must be 'max' or 'avg', got {mode!r}")
    h2, w2 = h // 2, w // 2
    crop = x.data[:2 * h2, :2 * w2]
    # windows flattened row-major: positions (0,0),(0,1),(1,0),(1,1)
    wins = crop.reshape(h2, 2, w2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h2, w2, 4, c)

    if mode == "max":
        arg = wins.argmax(axis=2)  # first max in row-major order on ties
        out = np.take_along_axis(wins, arg[:, :, None, :], axis=2)[:, :, 0, :]
    else:
        out = wins.mean(axis=2)

    def backward(g, grads):
        if not x.requires_grad:
            return
        dwins = np.zeros_like(wins)
        if mode == "max":
            np.put_along_axis(dwins, arg[:, :, None, :], g[:, :, None, :], axis=2)
        else:
            dwins += g[:, :, None, :] / 4.0
        dcrop = dwins.reshape(h2, w2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(2 * h2, 2 * w2, c)
        dx = np.zeros_like(x.data)
        dx[:2 * h2, :2 * w2] = dcrop
        _accum(grads, x, dx)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def dropout(x, drop_ratio: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train zeroes each element with p=drop_ratio and
    rescales survivors by 1/(1-drop_ratio); infer is the identity."""
    x = _as_tensor(x)
    if not 0.0 <= drop_ratio < 1.0:
        raise ValueError(f"drop_ratio must be in [0, 1), got {drop_ratio}")
    if mode == "infer" or drop_ratio == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.data.shape) >= drop_ratio) / (1.0 - drop_ratio)
    out = x.data * keep

    def backward(g, grads):
        _accum(grads, x, g * keep)

    return Tensor._from_op(out, (x,), backward)


def batchnorm(x, scale, shift, running_mean: np.ndarray, running_var: np.ndarray,
              mode: str, momentum: float = 0.9, epsilon: float = 1e-5) -> Tensor:
    """Per-channel (last axis) normalization.

    Train mode normalizes with the current batch moments and updates the
    running statistics by exponential moving average in place; infer mode
    uses the running statistics only.
    """
    x = _as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    if mode == "train":
        mean = reduce_sum(x, axis=axes) * (1.0 / n)
        centered = x - mean
        var = reduce_sum(centered * centered, axis=axes) * (1.0 / n)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean.data
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data
        xhat = centered * power(var + epsilon, -0.5)
    elif mode == "infer":
        xhat = (x - Tensor(running_mean)) * Tensor((running_var + epsilon) ** -0.5)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return xhat * scale + shift
