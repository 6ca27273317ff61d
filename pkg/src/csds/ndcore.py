"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: just enough operations to train a BN-free
encoder-decoder on CPU. Every tensor wraps a numpy buffer in B,C,H,W order.
Operations record a closure that maps the output gradient to input
gradients; :meth:`Tensor.backward` walks the recorded graph once in reverse
topological order.

Buffers keep whatever floating dtype they were created with (float32 by
default). Reductions accumulate in float64 and cast back.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_state = {"grad_enabled": True, "debug": False}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    _state["debug"] = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.array(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")

        graph = Graph.from_output(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in graph.reverse_order():
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def relu(self) -> Tensor:
        return relu(self)


class Graph:
    """Nodes reachable from one output, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def reverse_order(self) -> Iterable[Tensor]:
        return reversed(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericError("log of a negative value")
    out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    """max(0, x) with subgradient 0 at x == 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * mask,), "relu")


# -- reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = (np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64) / count).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype),)

    return _make(np.asarray(out), (x,), backward, "mean")


# -- structural -------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat shape mismatch: {t.shape} vs {ref}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


# -- convolutional building blocks -------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, im2col + one matrix product."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = weight.shape
    if Cin_w != Cin:
        raise DimensionError(f"weight expects {Cin_w} input channels, input has {Cin}")
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"kernel must be square and odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ConfigError("stride must be >= 1 and pad >= 0")
    if bias is not None and bias.shape != (Cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({Cout},)")
    k = kh
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError("input smaller than kernel")

    if stride == 1:
        return _conv2d_s1(x, weight, bias, pad)

    # windows are gathered channel-last so each copy moves contiguous channel runs
    xh = x.data.transpose(0, 2, 3, 1)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    cols = np.empty((B, Ho, Wo, k, k, Cin), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + hs:stride, j:j + ws:stride, :]
    cols = cols.reshape(B * Ho * Wo, k * k * Cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(Cout, k * k * Cin)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(Cout, k, k, Cin).transpose(0, 3, 1, 2)
        gb = None
        if bias is not None and bias.requires_grad:
            gb = np.sum(g2, axis=0, dtype=np.float64).astype(bias.dtype)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, k, k, Cin)
            gxh = np.zeros(xh.shape, dtype=dcols.dtype)
            for i in range(k):
                for j in range(k):
                    gxh[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[:, :, :, i, j, :]
            if pad:
                gxh = gxh[:, pad:pad + H, pad:pad + W, :]
            gx = gxh.transpose(0, 3, 1, 2)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def _conv2d_s1(x: Tensor, weight: Tensor, bias: Tensor | None, pad: int) -> Tensor:
    """Stride-1 conv on a flattened channel-last padded buffer.

    Output is computed for every padded-grid position; position p reads
    rows p + i*Wp + j, so the im2col matrix is a strided view of one buffer.
    Rows that fall outside the valid output are cropped.
    """
    B, Cin, H, W = x.shape
    Cout, _, k, _ = weight.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = Hp - k + 1, Wp - k + 1
    M = B * Hp * Wp
    tail = (k - 1) * Wp + (k - 1)
    dtype = np.result_type(x.dtype, weight.dtype)
    flat = np.zeros((M + tail, Cin), dtype=dtype)
    flat[:M].reshape(B, Hp, Wp, Cin)[:, pad:pad + H, pad:pad + W, :] = x.data.transpose(0, 2, 3, 1)
    s0, s1 = flat.strides
    view = as_strided(flat, shape=(M, k, k, Cin), strides=(s0, Wp * s0, s0, s1), writeable=False)
    cols = view.reshape(M, k * k * Cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(Cout, k * k * Cin)
    full = cols @ wmat.T
    if bias is not None:
        full += bias.data
    out = np.ascontiguousarray(full.reshape(B, Hp, Wp, Cout)[:, :Ho, :Wo, :].transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.zeros((B, Hp, Wp, Cout), dtype=g.dtype)
        g2[:, :Ho, :Wo, :] = g.transpose(0, 2, 3, 1)
        g2 = g2.reshape(M, Cout)
        gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(Cout, k, k, Cin).transpose(0, 3, 1, 2)
        gb = None
        if bias is not None and bias.requires_grad:
            gb = np.sum(g2, axis=0, dtype=np.float64).astype(bias.dtype)
        gx = None
        if x.requires_grad:
            # full correlation with the flipped kernel, same strided-view trick on a zero-prefixed buffer
            gpad = np.zeros((tail + M, Cout), dtype=g2.dtype)
            gpad[tail:] = g2
            t0, t1 = gpad.strides
            gcols = as_strided(gpad, shape=(M, k, k, Cout), strides=(t0, Wp * t0, t0, t1), writeable=False)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * Cout, Cin)
            gfull = gcols.reshape(M, k * k * Cout) @ wflip
            gx = gfull.reshape(B, Hp, Wp, Cin)[:, pad:pad + H, pad:pad + W, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max-pool with stride 2; ties route the gradient to the first maximum."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"max_pool2d needs even spatial dims, got {H}x{W}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _make(np.array(out, order="C"), (x,), backward, "max_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample_nearest")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), backward, "upsample_nearest")


# -- channel softmax ----------------------------------------------------------

def softmax_array(z: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_channel(logits: Tensor) -> Tensor:
    """Softmax over axis 1 (channels), max-subtracted."""
    if logits.ndim < 2 or logits.shape[1] < 2:
        raise ConfigError("softmax_channel needs at least 2 channels")
    p = softmax_array(logits.data)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return _make(p, (logits,), backward, "softmax_channel")


def log_softmax_channel(logits: Tensor) -> Tensor:
    if logits.ndim < 2 or logits.shape[1] < 2:
        raise ConfigError("log_softmax_channel needs at least 2 channels")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * np.sum(g, axis=1, keepdims=True),)

    return _make(out, (logits,), backward, "log_softmax_channel")


# -- deterministic randomness ---------------------------------------------------

class Rng:
    """Seeded random stream; ``split`` derives independent child streams.

    Streams are keyed by (seed, *path), so ``Rng(7).split(3)`` is the same
    stream no matter how much the parent has been consumed.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.path])))

    def split(self, index: int) -> Rng:
        return Rng(self.seed, self.path + (index,))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def coin(self, p: float = 0.5) -> bool:
        return bool(self._gen.random() < p)


# -- numerical gradient oracle ------------------------------------------------------

def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, evaluated in float64."""
    base = np.array(x, dtype=np.float64)
    grad = np.empty_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - eps
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between autodiff and central-difference gradients.

    The analytic gradient is taken at ``x`` in its own dtype; the numeric
    one is evaluated with ``x`` promoted to float64.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ConfigError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    xa = Tensor(x.data.copy(), requires_grad=True)
    out = f(xa)
    if out.size != 1:
        raise DimensionError("gradient_check needs a scalar-valued function")
    if not np.isfinite(out.item()):
        raise NumericError("f(x) is not finite")
    out.backward()
    analytic = np.zeros(x.shape) if xa.grad is None else xa.grad.astype(np.float64)
    numeric = numeric_gradient(f, x.data, eps)
    if not np.all(np.isfinite(numeric)):
        raise NumericError("numeric gradient is not finite")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
