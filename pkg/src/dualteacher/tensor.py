"""Dense tensors with reverse-mode differentiation.

Every op keeps the dtype of its inputs: models store float32, gradient checks
run the same graph in float64. Reductions (loss means, bias gradients)
accumulate in float64 regardless of storage dtype.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype == np.float64:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float32)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """N-dimensional array plus an optional gradient buffer.

    Float64 input arrays stay float64; anything else is stored as float32.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return NotImplemented

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    out.op = op
    return out


def _out_dtype(*tensors: Tensor):
    return np.result_type(*(t.dtype for t in tensors))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    dt = x.dtype
    return _result((x.data * c).astype(dt, copy=False), (x,),
                   lambda g: ((g * c).astype(dt, copy=False),), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,), "relu")


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    dt = x.dtype
    total = np.array(x.data.sum(dtype=np.float64), dtype=dt)
    shape = x.shape
    return _result(total, (x,), lambda g: (np.full(shape, g, dtype=dt),), "sum")


# ---------------------------------------------------------------- convolution

def _patches(xp: np.ndarray, h: int, w: int, buf: np.ndarray) -> np.ndarray:
    """Fill ``buf`` [C*9, H*W] with the 3x3 neighbourhoods of one padded image [C, H+2, W+2]."""
    view = buf.reshape(xp.shape[0], 3, 3, h, w)
    for i in range(3):
        for j in range(3):
            view[:, i, j] = xp[:, i:i + h, j:j + w]
    return buf


def _conv_padded(xp: np.ndarray, w2: np.ndarray, h: int, w: int) -> np.ndarray:
    """Convolve a zero-padded batch [N, Cin, H+2, W+2] with flattened kernels [Cout, Cin*9]."""
    n, cin = xp.shape[:2]
    buf = np.empty((cin * 9, h * w), dtype=xp.dtype)
    out = np.empty((n, w2.shape[0], h * w), dtype=xp.dtype)
    # image by image keeps the patch matrix cache-resident
    for k in range(n):
        np.matmul(w2, _patches(xp[k], h, w, buf), out=out[k])
    return out.reshape(n, w2.shape[0], h, w)


def _pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero same-padding."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {weight.shape}, {bias.shape}")
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape != (cout, cin, 3, 3) or bias.shape != (cout,):
        raise ShapeError(f"conv2d: weight {weight.shape} / bias {bias.shape} do not fit input {x.shape}")
    _check_finite(x.data, "conv2d input")
    dt = _out_dtype(x, weight, bias)
    xp = _pad(x.data.astype(dt, copy=False))
    wd = weight.data.astype(dt, copy=False)
    out = _conv_padded(xp, wd.reshape(cout, cin * 9), h, w)
    out += bias.data.astype(dt, copy=False)[None, :, None, None]
    need_dx = x.requires_grad

    def backward(g: np.ndarray):
        g = g.astype(dt, copy=False)
        g2 = g.reshape(n, cout, h * w)
        dw = np.zeros((cout, cin * 9), dtype=dt)
        buf = np.empty((cin * 9, h * w), dtype=dt)
        for k in range(n):
            dw += g2[k] @ _patches(xp[k], h, w, buf).T
        db = g2.sum(axis=(0, 2), dtype=np.float64).astype(dt)
        dx = None
        if need_dx:
            # input gradient = convolution of g with the spatially flipped, transposed kernel
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(cin, cout * 9)
            dx = _conv_padded(_pad(g), flipped, h, w)
        return dx, dw.reshape(weight.shape), db

    return _result(out, (x, weight, bias), backward, "conv2d")


# ---------------------------------------------------------------- losses

def _log_softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def pixel_cross_entropy(logits: Tensor, target, ignore_label: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[target].

    ``logits`` is [N, C, H, W]; ``target`` an integer map [N, H, W].
    """
    target = np.asarray(target)
    if logits.data.ndim != 4:
        raise ShapeError(f"logits must be [N,C,H,W], got {logits.shape}")
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    _check_finite(logits.data, "logits")
    valid = target != ignore_label
    count = int(valid.sum())
    if count == 0:
        raise ValueError("every pixel is ignored; cross-entropy mean is undefined")
    tgt = np.where(valid, target, 0).astype(np.int64)
    if tgt.min() < 0 or tgt.max() >= c:
        raise ValueError(f"target classes must lie in [0, {c}) or equal ignore_label")
    logp = _log_softmax64(logits.data)
    picked = np.take_along_axis(logp, tgt[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count
    dt = logits.dtype

    def backward(g: np.ndarray):
        grad = np.exp(logp)
        np.put_along_axis(grad, tgt[:, None], np.take_along_axis(grad, tgt[:, None], axis=1) - 1.0, axis=1)
        grad *= valid[:, None] * (float(g) / count)
        return (grad.astype(dt),)

    return _result(np.array(loss, dtype=dt), (logits,), backward, "pixel_ce")


def soft_cross_entropy(logits: Tensor, soft_target: np.ndarray) -> Tensor:
    """Cross-entropy against per-pixel class distributions [N, C, H, W].

    Pixels whose target mass is zero are ignored.
    """
    q = np.asarray(soft_target, dtype=np.float64)
    if q.shape != logits.shape:
        raise ShapeError(f"soft target {q.shape} does not match logits {logits.shape}")
    _check_finite(logits.data, "logits")
    mass = q.sum(axis=1)
    valid = mass > 0
    count = int(valid.sum())
    if count == 0:
        raise ValueError("soft target carries no mass on any pixel")
    logp = _log_softmax64(logits.data)
    loss = -(q * logp).sum() / count
    dt = logits.dtype

    def backward(g: np.ndarray):
        grad = (np.exp(logp) * mass[:, None] - q) * (float(g) / count)
        return (grad.astype(dt),)

    return _result(np.array(loss, dtype=dt), (logits,), backward, "soft_ce")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Channel softmax of a raw [N, C, H, W] array (no graph)."""
    return np.exp(_log_softmax64(np.asarray(logits)))


# ---------------------------------------------------------------- tape

class Tape:
    """Topologically ordered nodes that lead to an output tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)


def backward(loss: Tensor, tape: Optional[Tape] = None, params: Optional["ParamSet"] = None) -> None:
    """Accumulate dloss/dleaf into the ``grad`` of every reachable leaf.

    Leaves accumulate (call ``zero_grad`` first for a fresh step). When
    ``params`` is given, parameters the loss does not reach get zero grads.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    tape = tape or Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- parameters

class ParamSet(OrderedDict):
    """Named parameter tensors in a stable order."""

    def __setitem__(self, name: str, value: Tensor) -> None:
        if not isinstance(value, Tensor):
            raise TypeError(f"{name}: expected Tensor, got {type(value).__name__}")
        value.requires_grad = True
        super().__setitem__(name, value)

    @property
    def flat_length(self) -> int:
        return sum(p.size for p in self.values())

    def structure(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, p.shape) for k, p in self.items()]

    def same_structure(self, other: "ParamSet") -> bool:
        return self.structure() == other.structure()

    def to_flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.values()])

    def load_flat(self, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat)
        if flat.shape != (self.flat_length,):
            raise ShapeError(f"flat vector has {flat.size} values, expected {self.flat_length}")
        offset = 0
        for p in self.values():
            p.data = flat[offset:offset + p.size].reshape(p.shape).astype(p.dtype)
            offset += p.size
        return self

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, p in self.items():
            out[k] = Tensor(p.data.copy())
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for k, p in self.items():
            out[k] = Tensor(p.data, dtype=dtype)
        return out

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()

    def clear_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def equals(self, other: "ParamSet") -> bool:
        """Bit-exact equality of structure and values."""
        return self.same_structure(other) and all(
            np.array_equal(a.data.view(np.uint8), b.data.view(np.uint8))
            for a, b in zip(self.values(), other.values())
        )


class SGD:
    """theta <- theta - lr * (grad + weight_decay * theta); momentum off by default.

    With ``clip_norm`` the gradients are first rescaled so their global L2
    norm does not exceed it.
    """

    def __init__(self, params: ParamSet, lr: float, weight_decay: float = 0.0, momentum: float = 0.0,
                 clip_norm: Optional[float] = None):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.last_grad_norm = float("nan")
        self._velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
        norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params.values()))
        self.last_grad_norm = norm
        factor = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        for name, p in self.params.items():
            g = p.grad * p.dtype.type(factor) if factor != 1.0 else p.grad
            d = g + self.weight_decay * p.data if self.weight_decay else g
            if self.momentum:
                v = self._velocity.get(name)
                v = d if v is None else self.momentum * v + d
                self._velocity[name] = v
                d = v
            p.data = (p.data - self.lr * d).astype(p.dtype, copy=False)
            p.grad = None


def sgd_step(params: ParamSet, lr: float, weight_decay: float = 0.0) -> ParamSet:
    SGD(params, lr, weight_decay).step()
    return params

