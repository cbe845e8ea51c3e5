"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy array plus an optional gradient
buffer. Operations executed while a :class:`Tape` is active append nodes
(inputs, output, backward rule) in construction order, which is already a
topological order; :func:`backward` then walks the node list once in
reverse and accumulates ``dLoss/dTensor`` into every tensor that requires
a gradient.

Design constraints, in order of importance:

* correctness certified by finite differences (see :func:`finite_diff_check`),
* every op materializes its output (no views, no aliasing),
* float32 for training, float64 selectable for gradient checking,
* broadcasting limited to scalars, matching trailing dims, and a 1-D
  per-channel vector against an NCHW batch.

Outside a tape context ops behave as plain numpy computations, which is
the fast path used for inference.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "release_graph",
    "set_default_dtype",
    "default_dtype",
    "using_dtype",
    "set_num_threads",
    "num_threads",
    "conv2d",
    "maxpool2d",
    "upsample_nearest2",
    "batchnorm2d",
    "leaky_relu",
    "relu",
    "linear",
    "add",
    "sub",
    "mul",
    "finite_diff_check",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}

_state = threading.local()


def _tls_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def default_dtype() -> np.dtype:
    """Element type used for newly created tensors in this thread."""
    return _tls_dtype()


def set_default_dtype(name: str) -> None:
    """Select "float32" (training) or "float64" (gradient checking)."""
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}, expected one of {sorted(_DTYPES)}")
    _state.dtype = np.dtype(_DTYPES[name])


class using_dtype:
    """Context manager that temporarily switches the default element type."""

    def __init__(self, name: str):
        self._name = name

    def __enter__(self):
        self._prev = default_dtype()
        set_default_dtype(self._name)
        return self

    def __exit__(self, *exc):
        _state.dtype = self._prev
        return False


_num_threads = 1


def set_num_threads(n: int) -> None:
    """Thread count for data-parallel loops inside ops (1 = serial)."""
    global _num_threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _num_threads = int(n)


def num_threads() -> int:
    return _num_threads


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: "Tensor", inputs: tuple, backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Recorded operation list for one single-threaded computation context.

    Nodes are appended in execution order, so every node's inputs precede
    it and a single reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.released = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional dense array with optional gradient.

    ``data`` is always a C-contiguous numpy array of the package's float
    dtype. ``grad``, once populated by :func:`backward`, has the same shape
    and accumulates across calls until :meth:`zero_grad`. Leaf tensors have
    ``node_id is None``; tensors produced by a recorded op carry their node
    index on the tape that created them.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dt = np.dtype(dtype) if dtype is not None else default_dtype()
        self.data = np.ascontiguousarray(np.array(data, dtype=dt))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic. Scalar operands stay python floats so numpy keeps the
    # array dtype instead of upcasting to float64.
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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def abs(self):
        return _unary(self, np.abs(self.data), lambda g, d=self.data: g * np.sign(d))

    def exp(self):
        out = np.exp(self.data)
        return _unary(self, out, lambda g, o=out: g * o)

    def log(self):
        return _unary(self, np.log(self.data), lambda g, d=self.data: g / d)

    def square(self):
        return _unary(self, self.data * self.data, lambda g, d=self.data: 2.0 * d * g)

    def sqrt(self):
        out = np.sqrt(self.data)
        return _unary(self, out, lambda g, o=out: g * (0.5 / o))

    def mean(self):
        d = self.data
        out_t = Tensor(np.asarray(d.mean(), dtype=d.dtype), dtype=d.dtype)

        def bwd(g, shape=d.shape, n=d.size, dt=d.dtype):
            return [np.full(shape, np.asarray(g, dtype=dt) / n, dtype=dt)]

        return _record(out_t, (self,), bwd)

    def sum(self):
        d = self.data
        out_t = Tensor(np.asarray(d.sum(), dtype=d.dtype), dtype=d.dtype)

        def bwd(g, shape=d.shape, dt=d.dtype):
            return [np.full(shape, np.asarray(g, dtype=dt), dtype=dt)]

        return _record(out_t, (self,), bwd)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        new = np.reshape(self.data, shape).copy()
        orig = self.data.shape
        return _unary_data(self, new, lambda g: np.ascontiguousarray(g.reshape(orig)))

    def flatten(self):
        """Collapse all but the leading (batch) dimension."""
        if self.data.ndim < 2:
            raise ValueError(f"flatten needs a batch dimension, got shape {self.shape}")
        return self.reshape(self.data.shape[0], -1)


def _record(out: Tensor, inputs: tuple, backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        out._tape = tape
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def _unary(x: Tensor, out_data: np.ndarray, grad_fn: Callable) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    return _record(out, (x,), lambda g: [grad_fn(g)])


def _unary_data(x: Tensor, out_data: np.ndarray, grad_fn: Callable) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    return _record(out, (x,), lambda g: [grad_fn(g)])


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy().reshape(t.data.shape)
    else:
        t.grad += g.reshape(t.data.shape)


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dTensor into every requires_grad tensor below ``loss``.

    Repeated calls add into existing ``grad`` buffers; call ``zero_grad``
    between optimization steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise ValueError("backward() requires a loss recorded on an active tape")
    if tape.released:
        raise ValueError("backward() on a released graph; record a new tape")

    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = flow.pop(id(node.out), None)
        if g is None:
            continue
        if node.out.requires_grad:
            _accumulate(node.out, g)
        for t, ig in zip(node.inputs, node.backward_fn(g)):
            if ig is None or not t.requires_grad:
                continue
            if t.node_id is not None and t._tape is tape:
                key = id(t)
                prev = flow.get(key)
                flow[key] = ig if prev is None else prev + ig
            else:
                _accumulate(t, ig)


def release_graph(loss: Tensor) -> None:
    """Free the graph below ``loss`` without waiting for the cycle collector.

    Recorded tensors and their tape reference each other, so the buffers of
    a finished step survive until Python's cyclic GC runs; at image scale
    that lag adds up to gigabytes. Training loops call this once per step.
    Afterwards the tape cannot replay backward and says so.
    """
    tape = loss._tape
    if tape is not None:
        tape.nodes.clear()
        tape.released = True


# ---------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _align_pair(ad: np.ndarray, bd: np.ndarray):
    """Reshape a per-channel vector against an NCHW operand; reject the rest."""
    if ad.ndim == 1 and bd.ndim == 4 and ad.shape[0] == bd.shape[1]:
        ad = ad.reshape(1, -1, 1, 1)
    elif bd.ndim == 1 and ad.ndim == 4 and bd.shape[0] == ad.shape[1]:
        bd = bd.reshape(1, -1, 1, 1)
    try:
        np.broadcast_shapes(ad.shape, bd.shape)
    except ValueError:
        raise ValueError(f"incompatible shapes for elementwise op: {ad.shape} vs {bd.shape}") from None
    return ad, bd


def _binary(a, b, fwd, grad_a, grad_b) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        ad, bd = _align_pair(a.data, b.data)
        out = Tensor(fwd(ad, bd))
        a_shape, b_shape = a.data.shape, b.data.shape

        def bwd(g):
            ga = _unbroadcast(grad_a(g, ad, bd), ad.shape).reshape(a_shape)
            gb = _unbroadcast(grad_b(g, ad, bd), bd.shape).reshape(b_shape)
            return [ga, gb]

        return _record(out, (a, b), bwd)

    # tensor-with-scalar
    if isinstance(a, Tensor):
        t, s, t_first = a, float(b), True
    else:
        t, s, t_first = b, float(a), False
    td = t.data
    out = Tensor(fwd(td, s) if t_first else fwd(s, td))
    if t_first:
        return _record(out, (t,), lambda g: [grad_a(g, td, s)])
    return _record(out, (t,), lambda g: [grad_b(g, s, td)])


def add(a, b) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x + y,
        lambda g, x, y: g,
        lambda g, x, y: g,
    )


def sub(a, b) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x - y,
        lambda g, x, y: g,
        lambda g, x, y: -g,
    )


def mul(a, b) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x * y,
        lambda g, x, y: g * y,
        lambda g, x, y: g * x,
    )


# ---------------------------------------------------------------------------
# neural-network primitives


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp_shape[:2]
    gc = gcols.reshape(n, c, kh, kw, oh, ow)
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gc[:, :, i, j]
    return gxp


def _batched_matmul(wmat: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # (F, K) @ (N, K, P) -> (N, F, P); batch items are independent, so this
    # may run data-parallel without changing any per-sample arithmetic.
    n = cols.shape[0]
    if _num_threads > 1 and n > 1:
        out = np.empty((n, wmat.shape[0], cols.shape[2]), dtype=cols.dtype)

        def work(i):
            out[i] = wmat @ cols[i]

        with ThreadPoolExecutor(max_workers=min(_num_threads, n)) as pool:
            list(pool.map(work, range(n)))
        return out
    return np.matmul(wmat, cols)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an NCHW batch.

    Output spatial size is floor((H + 2*padding - kH) / stride) + 1 per axis.
    Differentiable with respect to input, kernel, and bias.
    """
    xd, wd = x.data, kernel.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {xd.shape} and {wd.shape}")
    if int(stride) < 1 or int(padding) < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    stride, padding = int(stride), int(padding)
    n, c, h, w = xd.shape
    f, ck, kh, kw = wd.shape
    if c != ck:
        raise ValueError(
            f"conv2d channel mismatch: input shape {xd.shape} has {c} channels, "
            f"kernel shape {wd.shape} expects {ck}"
        )
    if bias.data.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.data.shape} does not match {f} filters")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )

    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = wd.reshape(f, c * kh * kw)
    out_data = _batched_matmul(wmat, cols) + bias.data.reshape(1, f, 1)
    out = Tensor(out_data.reshape(n, f, oh, ow))

    def bwd(g):
        gf = g.reshape(n, f, oh * ow)
        gb = gf.sum(axis=(0, 2))
        gw = np.tensordot(gf, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        gcols = np.matmul(wmat.T, gf)
        gxp = _col2im(gcols, xp.shape, kh, kw, stride, oh, ow)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return [gx, gw, gb]

    return _record(out, (x, kernel, bias), bwd)


def maxpool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """2x2 stride-2 max pooling; ties go to the first element in row-major window order."""
    if size != 2 or stride != 2:
        raise ValueError(f"maxpool2d supports size=2, stride=2 only, got size={size}, stride={stride}")
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"maxpool2d expects 4-d input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    windows = xd.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

    def bwd(g):
        gw = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return [gw.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)]

    return _record(out, (x,), bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 block."""
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"upsample_nearest2 expects 4-d input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    out = Tensor(xd.repeat(2, axis=2).repeat(2, axis=3))

    def bwd(g):
        return [g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))]

    return _record(out, (x,), bwd)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with biased batch statistics and folds them into
    the running buffers as ``running = (1 - momentum) * running + momentum * batch``;
    eval mode normalizes with the running buffers. Differentiable with
    respect to input, gamma, and beta.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"batchnorm2d expects 4-d input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.data.shape != (c,):
            raise ValueError(f"batchnorm2d {name} shape {t.data.shape} does not match {c} channels")

    axes = (0, 2, 3)
    m = n * h * w
    if mode == "train":
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean.data = ((1.0 - momentum) * running_mean.data + momentum * mu).astype(xd.dtype)
        running_var.data = ((1.0 - momentum) * running_var.data + momentum * var).astype(xd.dtype)
    else:
        mu = running_mean.data
        var = running_var.data

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
    out = Tensor(gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1))

    def bwd(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        if mode == "train":
            s1 = dxhat.sum(axis=axes).reshape(1, c, 1, 1)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(1, c, 1, 1)
            gx = (ivar.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * ivar.reshape(1, c, 1, 1)
        return [gx, ggamma, gbeta]

    return _record(out, (x, gamma, beta), bwd)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """x for x > 0, slope * x otherwise; gradient is slope at exactly 0."""
    xd = x.data
    out = Tensor(np.where(xd > 0, xd, np.asarray(slope, dtype=xd.dtype) * xd))

    def bwd(g, s=float(slope)):
        return [g * np.where(xd > 0, np.asarray(1.0, dtype=g.dtype), np.asarray(s, dtype=g.dtype))]

    return _record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); gradient is 0 for x <= 0."""
    xd = x.data
    out = Tensor(np.maximum(xd, 0))

    def bwd(g):
        return [g * (xd > 0)]

    return _record(out, (x,), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: x @ weight + bias, with x of shape (N, D) and weight (D, K)."""
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ValueError(f"linear expects 2-d input and weight, got {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[0]:
        raise ValueError(f"linear dimension mismatch: input {xd.shape} vs weight {wd.shape}")
    if bd.shape != (wd.shape[1],):
        raise ValueError(f"linear bias shape {bd.shape} does not match {wd.shape[1]} outputs")
    out = Tensor(xd @ wd + bd)

    def bwd(g):
        return [g @ wd.T, xd.T @ g, g.sum(axis=0)]

    return _record(out, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of ``point``. The
    relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    Run under float64 for meaningful tolerances.
    """
    point.requires_grad = True
    point.grad = None
    with Tape():
        y = f(point)
    backward(y)
    analytic = point.grad.reshape(-1).copy()

    flat = point.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(point).item()
        flat[i] = orig - h
        fm = f(point).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(float(analytic[i]) - numeric) / max(1.0, abs(float(analytic[i])))
        worst = max(worst, err)
    return worst


def grad_of(f: Callable[[Tensor], Tensor], point: Tensor) -> np.ndarray:
    """Analytic gradient of a scalar-valued function at ``point``."""
    point.requires_grad = True
    point.grad = None
    with Tape():
        y = f(point)
    backward(y)
    return point.grad.copy()


def numeric_grad_at(f: Callable[[Tensor], Tensor], point: Tensor, index: int, h: float = 1e-5) -> float:
    """Central finite difference of ``f`` along one flattened coordinate."""
    flat = point.data.reshape(-1)
    orig = flat[index]
    flat[index] = orig + h
    fp = f(point).item()
    flat[index] = orig - h
    fm = f(point).item()
    flat[index] = orig
    return (fp - fm) / (2.0 * h)
