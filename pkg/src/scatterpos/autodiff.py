"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op returns a new :class:`Tensor`. When any input requires a gradient
the output keeps references to its parents and a closure mapping the output
gradient to the parents' gradients. :func:`backward` replays those records
in reverse execution order.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805
LEAKY_SLOPE = 0.01

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError("non-finite value produced in forward pass")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def tsum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return _result(np.asarray(a.data.mean()), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """(m, k) @ (k, n); gradients dA = dC B^T and dB = A^T dC."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b),
                   lambda g: (g @ bd.T if a.requires_grad else None,
                              ad.T @ g if b.requires_grad else None))


def conv1d(x, w, stride: int = 1, bias=None) -> Tensor:
    """Valid 1-D cross-correlation.

    x: (batch, c_in, len) or (c_in, len); w: (c_out, c_in, ksize); bias: (c_out,).
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    if xd.ndim != 3 or wd.ndim != 3:
        raise ShapeError("conv1d expects x (B, C, L) and w (O, C, K)")
    B, C, L = xd.shape
    O, Cw, K = wd.shape
    if Cw != C:
        raise ShapeError(f"conv1d channel mismatch: input {C}, kernel {Cw}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if L < K:
        raise ShapeError(f"conv1d input length {L} shorter than kernel {K}")
    n_out = (L - K) // stride + 1
    # (B, C, n_out, K) strided view, then (B, n_out, C*K) for one GEMM
    win = np.lib.stride_tricks.sliding_window_view(xd, K, axis=2)[:, :, ::stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * n_out, C * K)
    w2 = wd.reshape(O, C * K)
    out = (cols @ w2.T).reshape(B, n_out, O).transpose(0, 2, 1)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def backward(g):
        g3 = g[None] if squeeze else g
        gm = g3.transpose(0, 2, 1).reshape(B * n_out, O)
        gw = (gm.T @ cols).reshape(O, C, K) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ w2).reshape(B, n_out, C, K)
            gx = np.zeros((B, C, L))
            span = stride * (n_out - 1) + 1
            for k in range(K):
                gx[:, :, k:k + span:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            if squeeze:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return tuple(grads)

    return _result(out, tuple(parents), backward)


# -- activations -----------------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * np.tanh(0.5 * x.data) + 0.5
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    d = np.where(x.data > 0, 1.0, slope)
    return _result(x.data * d, (x,), lambda g: (g * d,))


def selu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    e = np.exp(np.minimum(x.data, 0.0))
    out = SELU_SCALE * np.where(pos, x.data, SELU_ALPHA * (e - 1.0))
    d = SELU_SCALE * np.where(pos, 1.0, SELU_ALPHA * e)
    return _result(out, (x,), lambda g: (g * d,))


ACTIVATIONS = {"sigmoid": sigmoid, "relu": relu, "leaky_relu": leaky_relu, "selu": selu}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# -- normalisation and loss -----------------------------------------------------

def batchnorm1d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-feature normalisation of (batch, feat) or per-channel of (batch, chan, len).

    Train mode uses batch statistics and updates the running buffers in place
    (unbiased variance, as in the usual framework convention).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    if xd.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif xd.ndim == 3:
        axes, bshape = (0, 2), (1, -1, 1)
    else:
        raise ShapeError("batchnorm1d expects 2-D or 3-D input")
    n = xd.size // xd.shape[1]
    if training:
        if xd.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs batch >= 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * invstd.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            dx = (invstd.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            dx = dxhat * invstd.reshape(bshape)
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward)


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _result(np.asarray(np.mean(diff * diff)), (pred, target),
                   lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


# -- backward pass -----------------------------------------------------------------

@dataclass
class Tape:
    """Operations reachable from an output, in execution order."""

    nodes: list

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen, stack, nodes = set(), [out], []
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ShapeError("backward needs a scalar loss")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``f`` maps the input tensors to a scalar tensor. Error per coordinate is
    |a - n| / max(1e-8, |a| + |n|).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    backward(out)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
