"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever at least one input tracks gradients. Outside a tape
they are plain numpy computations.
"""

from __future__ import annotations

import contextvars
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
PRECISION_ENV = "HELIOFORGE_PRECISION"
_precision = os.environ.get(PRECISION_ENV, "f64")
if _precision not in _DTYPES:
    raise ValueError(f"{PRECISION_ENV} must be one of {sorted(_DTYPES)}, got {_precision!r}")

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def set_precision(name: str) -> None:
    global _precision
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _precision = name


def get_precision() -> str:
    return _precision


def get_dtype():
    return _DTYPES[_precision]


class Tensor:
    __slots__ = ("data", "grad", "track_grad")

    def __init__(self, data, track_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.grad: np.ndarray | None = None
        self.track_grad = track_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, track_grad={self.track_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; nodes are appended in execution order,
    which is already a topological order of the graph."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            t.track_grad = True
            if id(t) not in self._produced:
                self._leaves[id(t)] = t

    def reset(self) -> None:
        self.nodes.clear()
        self._produced.clear()
        self._leaves.clear()
        self._consumed = False

    def _add(self, node: Node) -> None:
        for t in node.inputs:
            if t.track_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t
        self._produced.add(id(node.output))
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced and id(loss) not in self._leaves:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.track_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype)
        self._consumed = True


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def record(name: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    """Wrap ``out`` as a Tensor and register its backward rule on the active tape.

    ``vjp`` maps the output gradient to one gradient (or None) per input.
    Exposed so callers can define custom differentiable operations.
    """
    result = Tensor(out, dtype=out.dtype)
    tape = _active_tape.get()
    if tape is not None and any(t.track_grad for t in inputs):
        result.track_grad = True
        tape._add(Node(name, tuple(inputs), result, vjp))
    return result


# ---------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding of one pixel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d supports 3x3 kernels only, got {kh}x{kw}")
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")

    # im2col: cols[c, i, j, n, y, x] = padded input at (y + i, x + j)
    xc = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1))).transpose(1, 0, 2, 3)
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.data.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xc[:, :, i:i + h, j:j + w]
    cols = cols.reshape(c * 9, n * h * w)
    wd = weight.data
    out = (wd.reshape(f, c * 9) @ cols).reshape(f, n, h, w)
    out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def vjp(g):
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
        dx = dw = db = None
        if weight.track_grad:
            dw = (gc @ cols.T).reshape(f, c, 3, 3)
        if x.track_grad:
            dcols = (wd.reshape(f, c * 9).T @ gc).reshape(c, 3, 3, n, h, w)
            dxc = np.zeros((c, n, h + 2, w + 2), dtype=g.dtype)
            for i in range(3):
                for j in range(3):
                    dxc[:, :, i:i + h, j:j + w] += dcols[:, i, j]
            dx = np.ascontiguousarray(dxc[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))
        if bias.track_grad:
            db = gc.sum(axis=1)
        return dx, dw, db

    return record("conv2d", (x, weight, bias), out, vjp)


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    The scale is ``sqrt(max(var, eps))``: channels with variance above ``eps``
    come out with exactly unit variance, constant channels come out as zeros.
    ``running_mean``/``running_var`` are updated in place in train mode.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d gamma/beta must have shape ({c},)")
    xd = x.data
    shape = (1, c, 1, 1)
    if mode == "train":
        if n < 2:
            raise ValueError("batchnorm2d in train mode needs at least 2 samples")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if update_stats:
            count = n * h * w
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * var * count / (count - 1)
        active = var > eps
    elif mode == "eval":
        mean = running_mean
        var = running_var
        active = None
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    scale = np.sqrt(np.maximum(var, eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(shape)) / scale.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.track_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.track_grad else None
        dx = None
        if x.track_grad:
            dxhat = g * gamma.data.reshape(shape)
            if active is None:
                dx = dxhat / scale.reshape(shape)
            else:
                m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True) * active.reshape(shape)
                dx = (dxhat - m1 - xhat * m2) / scale.reshape(shape)
        return dx, dgamma, dbeta

    return record("batchnorm2d", (x, gamma, beta), out, vjp)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties send the gradient to the first cell in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return record("maxpool2", (x,), out, vjp)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense inner dims disagree: {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
    out = x.data @ weight.data + bias.data

    def vjp(g):
        dx = g @ weight.data.T if x.track_grad else None
        dw = x.data.T @ g if weight.track_grad else None
        db = g.sum(axis=0) if bias.track_grad else None
        return dx, dw, db

    return record("dense", (x, weight, bias), out, vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def vjp(g):
        return (g * mask,)

    return record("relu", (x,), out, vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate) so eval mode is the identity."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1 - rate)
    out = x.data * keep

    def vjp(g):
        return (g * keep,)

    return record("dropout", (x,), out, vjp)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def vjp(g):
        return (g.reshape(shape),)

    return record("flatten", (x,), out, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(first) or any(a != b for k, (a, b) in enumerate(zip(first, t.shape)) if k != axis % len(first)):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {first} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", tensors, out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    out = a.data * b.data

    def vjp(g):
        return (g * b.data if a.track_grad else None, g * a.data if b.track_grad else None)

    return record("mul", (a, b), out, vjp)


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (x,), out, vjp)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss needs equal shapes, got {pred.shape} and {target.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss of an empty batch is undefined")
    diff = pred.data - target.data
    out = np.asarray(np.mean(diff * diff))
    scale = 2.0 / diff.size

    def vjp(g):
        d = g * scale * diff
        return (d if pred.track_grad else None, -d if target.track_grad else None)

    return record("mse_loss", (pred, target), out, vjp)
