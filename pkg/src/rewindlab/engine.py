"""Dense tensors with tape-based reverse-mode differentiation.

Everything is backed by numpy arrays. Images are NHWC, convolution kernels are
``(out_channels, kh, kw, in_channels)`` and dense kernels ``(out, in)``, so the
leading axis of every prunable kernel indexes its output units.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

BN_EPSILON = 1e-5

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run primitives without recording the tape (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        """Populate ``.grad`` on every requires_grad tensor reachable from self."""
        backprop(self)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward, name=None) -> Tensor:
    out = Tensor(data, name=name)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
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


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes that ``root`` depends on, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backprop(loss: Tensor) -> list[Tensor]:
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # drop cached activations as soon as they are consumed
        node._backward = None
        node._parents = ()
    return order


class Graph:
    """A forward function plus the tape it recorded on the last call.

    ``fn`` maps a dict of named input tensors to a dict of named outputs.
    """

    def __init__(self, fn: Callable[[Mapping[str, Tensor]], Mapping[str, Tensor]]):
        self.fn = fn
        self.inputs: dict[str, Tensor] = {}
        self.outputs: dict[str, Tensor] = {}
        self.nodes: list[Tensor] = []

    def forward(self, inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
        self.inputs = dict(inputs)
        for t in self.inputs.values():
            t.grad = None
        self.outputs = dict(self.fn(self.inputs))
        seen: set[int] = set()
        nodes: list[Tensor] = []
        for out in self.outputs.values():
            for n in topological_order(out):
                if id(n) not in seen:
                    seen.add(id(n))
                    nodes.append(n)
        self.nodes = nodes
        return self.outputs

    def backward(self, loss_name: str) -> dict[str, np.ndarray]:
        if loss_name not in self.outputs:
            raise KeyError(f"no output named {loss_name!r}; have {sorted(self.outputs)}")
        backprop(self.outputs[loss_name])
        grads = {}
        for name, t in self.inputs.items():
            if t.requires_grad:
                grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return grads


# ----------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), "add", backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), "mul", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: expected (m, k) @ (k, n), got {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def sum_(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(data), (a,), "sum", backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _node(data, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _node(a.data * pos, (a,), "relu", lambda g: (g * pos,))


def sum_of_squares(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of w**2 over every element of every tensor (the L2 penalty body)."""
    if not tensors:
        return Tensor(np.zeros((), dtype=np.float32))
    data = np.asarray(sum(float(np.vdot(t.data, t.data)) for t in tensors),
                      dtype=tensors[0].dtype)

    def backward(g):
        return tuple(2.0 * g * t.data for t in tensors)

    return _node(data, tuple(tensors), "sum_of_squares", backward)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None, name: str = "dense") -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out_features, in_features)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"{name}: expected input (n, {w.shape[1] if w.data.ndim == 2 else '?'}) "
                         f"for kernel {w.shape}, got {x.shape}")
    data = x.data @ w.data.T
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"{name}: bias shape {b.shape} != ({w.shape[0]},)")
        data = data + b.data
        parents = (x, w, b)

    def backward(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _node(data, parents, "dense", backward, name)


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    """Output size and (top, bottom, left, right) zero padding, TF conventions."""
    if padding == "same":
        ho, pt, pb = _same_padding(h, kh, stride)
        wo, pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return ho, wo, (pt, pb, pl, pr)


def _check_conv(x: Tensor, w: Tensor, name: str) -> None:
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[3]:
        raise ShapeError(f"{name}: expected NHWC input with {w.shape[3] if w.data.ndim == 4 else '?'} "
                         f"channels for kernel {w.shape} (out, kh, kw, in), got {x.shape}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same",
           name: str = "conv2d") -> Tensor:
    """2-D convolution (cross-correlation) via a patch matrix and one GEMM."""
    _check_conv(x, w, name)
    n, h, wd, c = x.shape
    cout, kh, kw, _ = w.shape
    ho, wo, (pt, pb, pl, pr) = conv_geometry(h, wd, kh, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"{name}: kernel {kh}x{kw} larger than input {h}x{wd}")
    xd = x.data
    if pt or pb or pl or pr:
        xp = np.zeros((n, h + pt + pb, wd + pl + pr, c), dtype=xd.dtype)
        xp[:, pt:pt + h, pl:pl + wd, :] = xd
    else:
        xp = xd
    ys = slice(None, (ho - 1) * stride + 1, stride)
    xs = slice(None, (wo - 1) * stride + 1, stride)
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, ys, xs, :]).reshape(n * ho * wo, c)
    else:
        cols6 = np.empty((n, ho, wo, kh, kw, c), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols6[:, :, :, i, j, :] = xp[:, i:i + (ho - 1) * stride + 1:stride,
                                             j:j + (wo - 1) * stride + 1:stride, :]
        cols = cols6.reshape(n * ho * wo, kh * kw * c)
    wm = w.data.reshape(cout, -1)
    data = (cols @ wm.T).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    tap = (g2 @ w.data[:, i, j, :]).reshape(n, ho, wo, c)
                    gxp[:, i:i + (ho - 1) * stride + 1:stride,
                        j:j + (wo - 1) * stride + 1:stride, :] += tap
            gx = gxp[:, pt:pt + h, pl:pl + wd, :]
        return gx, gw

    return _node(data, (x, w), "conv2d", backward, name)


def conv2d_reference(x: np.ndarray, w: np.ndarray, stride: int = 1,
                     padding: str = "same") -> np.ndarray:
    """Explicit-loop convolution; the oracle for :func:`conv2d`."""
    n, h, wd, c = x.shape
    cout, kh, kw, cin = w.shape
    if cin != c:
        raise ShapeError(f"conv2d_reference: kernel expects {cin} channels, input has {c}")
    ho, wo, (pt, _, pl, _) = conv_geometry(h, wd, kh, kw, stride, padding)
    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(x, w))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    acc = 0.0
                    for i in range(kh):
                        iy = oy * stride + i - pt
                        if not 0 <= iy < h:
                            continue
                        for j in range(kw):
                            ix = ox * stride + j - pl
                            if not 0 <= ix < wd:
                                continue
                            acc += float(np.dot(x[b, iy, ix, :], w[co, i, j, :]))
                    out[b, oy, ox, co] = acc
    return out


def _colsum(x2: np.ndarray) -> np.ndarray:
    # GEMV is far faster than ndarray.sum(axis=0) for tall, narrow arrays
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, moving_mean: np.ndarray,
              moving_var: np.ndarray, decay: float, training: bool,
              eps: float = BN_EPSILON, name: str = "batchnorm") -> Tensor:
    """Channel-last batch normalization.

    In training mode the moving statistics are updated in place with
    ``m <- decay * m + (1 - decay) * batch_stat``; the batch variance is the
    biased (population) estimate for both normalization and the update.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"{name}: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    if not 0.0 < decay < 1.0:
        raise ValueError(f"{name}: decay must lie in (0, 1), got {decay}")
    count = x.size // c if c else 0
    if count == 0:
        raise ValueError(f"{name}: empty batch")
    x2 = x.data.reshape(count, c)
    dtype = x2.dtype
    if training:
        mu = _colsum(x2) / count
        xc = x2 - mu
        var = _colsum(xc * xc) / count
        moving_mean *= decay
        moving_mean += (1.0 - decay) * mu
        moving_var *= decay
        moving_var += (1.0 - decay) * var
    else:
        mu = moving_mean.astype(dtype, copy=False)
        var = moving_var.astype(dtype, copy=False)
        xc = x2 - mu
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = xc * inv_std
    data = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(count, c)
        gbeta = _colsum(g2)
        ggamma = _colsum(g2 * xhat)
        if training:
            # sum(g*gamma) = gamma*gbeta, sum(g*gamma*xhat) = gamma*ggamma
            scale = gamma.data * inv_std
            gx = scale * (g2 - gbeta / count - xhat * (ggamma / count))
        else:
            gx = g2 * (gamma.data * inv_std)
        return gx.reshape(x.shape), ggamma, gbeta

    return _node(data, (x, gamma, beta), "batchnorm", backward, name)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return _node(x.data.mean(axis=(1, 2)), (x,), "global_avg_pool", backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy from logits (stable log-sum-exp).

    ``labels`` are class indices of shape (batch,) or one-hot/probability
    rows of shape (batch, classes).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (batch, classes) logits, got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if labels.shape[0] != b:
            raise ShapeError(f"softmax_cross_entropy: {b} logits rows but {labels.shape[0]} labels")
        target = np.zeros((b, k), dtype=logits.dtype)
        target[np.arange(b), labels] = 1.0
    else:
        if labels.shape != (b, k):
            raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} vs logits {logits.shape}")
        target = labels.astype(logits.dtype)
    logp = log_softmax(logits.data)
    data = np.asarray(-(target * logp).sum() / b, dtype=logits.dtype)

    def backward(g):
        return (g * (np.exp(logp) - target) / b,)

    return _node(data, (logits,), "softmax_cross_entropy", backward)


# ------------------------------------------------------------ gradient check

def numerical_gradients(fn: Callable[[dict[str, Tensor]], Tensor],
                        inputs: Mapping[str, np.ndarray], h: float = 1e-3,
                        order: int = 4) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar function of named arrays.

    ``order=2`` is the plain (f(x+h) - f(x-h)) / 2h stencil. ``order=4`` adds
    the +-2h points, cancelling the h**2 truncation term that otherwise
    dominates for small gradient entries of BN-heavy graphs.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    taps = ((1, 1.0),) if order == 2 else ((1, 4.0 / 3.0), (2, -1.0 / 3.0))
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    def at() -> float:
        with no_grad():
            return fn({k: Tensor(v) for k, v in arrays.items()}).item()

    out = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            acc = 0.0
            for m, c in taps:
                flat[i] = orig + m * h
                fp = at()
                flat[i] = orig - m * h
                fm = at()
                acc += c * (fp - fm) / (2 * m * h)
            flat[i] = orig
            gflat[i] = acc
        out[name] = g
    return out


def analytic_gradients(fn: Callable[[dict[str, Tensor]], Tensor],
                       inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    graph = Graph(lambda ins: {"loss": fn(dict(ins))})
    graph.forward({k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                   for k, v in inputs.items()})
    return graph.backward("loss")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(fn: Callable[[dict[str, Tensor]], Tensor],
                   inputs: Mapping[str, np.ndarray], h: float = 1e-3, order: int = 4) -> float:
    """Max relative error between backprop and central differences (float64)."""
    a = analytic_gradients(fn, inputs)
    n = numerical_gradients(fn, inputs, h, order)
    return max((relative_error(a[k], n[k]) for k in inputs), default=0.0)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
               dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
