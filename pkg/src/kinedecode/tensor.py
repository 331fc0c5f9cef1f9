# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Reverse-mode automatic differentiation over float64 NumPy arrays.

Every primitive returns a new :class:`Tensor`. When any input requires a
gradient the result remembers its parents and a backward rule; calling
:meth:`Tensor.backward` on a scalar orders those records into a
:class:`ComputationTape` and runs the rules in reverse.
"""

import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

_logger = logging.getLogger("kinedecode.tensor")

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class TapeError(Exception):
    """Raised when backward is run on a graph that cannot be differentiated."""


class Tensor:
    """An n-dimensional float64 array with optional gradient tracking.

    Args:
        values: Anything :func:`numpy.asarray` accepts.
        requires_grad: Accumulate ``d(loss)/d(self)`` into :attr:`grad`.
        name: Used in log and error messages only.
    """

    __slots__ = ("values", "requires_grad", "name", "_grad", "_parents", "_backward",
                 "_op", "_consumed")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None,
                 _op: str = "leaf"):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def grad(self) -> Optional[np.ndarray]:
        if self._grad is None and self.requires_grad and self.is_leaf:
            return np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.array(value, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.size != 1:
            raise ValueError("item() needs a single-element tensor, shape is %s" % (self.shape,))
        return float(self.values.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        label = "" if self.name is None else " %s" % self.name
        return "Tensor%s(shape=%s, op=%s, requires_grad=%s)" % (
            label, self.shape, self._op, self.requires_grad)

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
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("Tensor division is only supported by a constant")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=tuple(parents),
                      _backward=backward_fn, _op=op)
    return Tensor(values, _op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum *grad* down to *shape* after NumPy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class ComputationTape:
    """Operations reachable from a root, in topological order.

    Backward visits every node once, in reverse; gradients reaching a node
    through several consumers add up.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self):
        return len(self.nodes)

    def run(self, seed: np.ndarray) -> None:
        grads: Dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node._grad = g.copy() if node._grad is None else node._grad + g
                continue
            if node._consumed or node._backward is None:
                raise TapeError("Backward through %r a second time; run the forward pass again"
                                % node)
            if g is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
            node._consumed = True
            node._backward = None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf that *loss* depends on."""
    if loss.size != 1:
        raise TapeError("backward() needs a scalar loss, got shape %s" % (loss.shape,))
    if not loss.requires_grad:
        raise TapeError("Loss does not depend on any tensor that requires a gradient")
    if loss._consumed:
        raise TapeError("Backward already ran on this graph; run the forward pass again")
    tape = ComputationTape(loss)
    _logger.debug("Running backward over %d recorded nodes", len(tape))
    tape.run(np.ones_like(loss.values))


# Elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.values + b.values, (a, b), _backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.values - b.values, (a, b), _backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)
    return _result(a.values * b.values, (a, b), _backward, "mul")


def scale(a: ArrayLike, c: float) -> Tensor:
    a, c = as_tensor(a), float(c)
    return _result(a.values * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    return _result(a.values ** 2, (a,), lambda g: (2.0 * a.values * g,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.values), (a,), lambda g: (g / a.values,), "log")


# Activations

def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _result(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.values
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)
    slope = np.where(x > 0, 1.0, neg + alpha)
    return _result(out, (a,), lambda g: (g * slope,), "elu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.values)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# Shape manipulation

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return _result(a.values.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; with no *axes* swap the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.values, axes), (a,),
                   lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _result(np.concatenate([t.values for t in tensors], axis=axis), tensors,
                   _backward, "concat")


def pick(a: Tensor, index) -> Tensor:
    """``out[..., ] = a[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ValueError("Index shape %s does not match tensor batch shape %s"
                         % (index.shape, a.shape[:-1]))
    out = np.take_along_axis(a.values, index[..., None], axis=-1)[..., 0]

    def _backward(g):
        full = np.zeros_like(a.values)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)
    return _result(out, (a,), _backward, "pick")


# Reductions

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _result(a.values.sum(axis=axis, keepdims=keepdims), (a,), _backward, "sum")


def mean_over_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# Linear algebra

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions, got %s and %s"
                         % (a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise ValueError("matmul shape mismatch: %s @ %s" % (a.shape, b.shape))

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(np.matmul(a.values, b.values), (a, b), _backward, "matmul")


def dense(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ W + b``."""
    if W.ndim != 2:
        raise ValueError("Dense weight must be 2-D, got shape %s" % (W.shape,))
    if x.shape[-1] != W.shape[0]:
        raise ValueError("Dense input width %d does not match weight %s"
                         % (x.shape[-1], W.shape))
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError("Dense bias shape %s does not match output width %d"
                         % (b.shape, W.shape[1]))
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), W), (W.shape[1],))
    else:
        y = matmul(x, W)
    return y if b is None else add(y, b)


# Normalization

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _result(out, (a,), _backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def _backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)
    return _result(out, (a,), _backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale and shift.

    The variance is floored at *eps* rather than offset by it, so inputs that
    already have unit variance come out exact.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("Layer norm gain/bias must have shape (%d,)" % d)
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    active = var > eps
    sigma = np.sqrt(np.where(active, var, eps))
    xhat = centered / sigma
    out = xhat * gain.values + bias.values

    def _backward(g):
        gxhat = g * gain.values
        gx = (gxhat - gxhat.mean(axis=-1, keepdims=True)
              - active * xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)) / sigma
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _result(out, (x, gain, bias), _backward, "layer_norm")


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError("Dropout rate must be in [0, 1), got %r" % p)
    if rng is None:
        raise ValueError("Dropout in training mode needs a random generator")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.values * mask, (a,), lambda g: (g * mask,), "dropout")


# Temporal convolution and pooling

def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation ``y[n, o, t] = sum_{c,k} w[o, c, k] * x[n, c, t*stride + k]``.

    *x* is ``[N, C_in, T]``, *w* is ``[C_out, C_in, K]``; the kernel is not
    flipped. *padding* zeros are added on both ends of the time axis.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError("conv1d expects x [N, C_in, T] and w [C_out, C_in, K], got %s and %s"
                         % (x.shape, w.shape))
    n, c_in, t = x.shape
    c_out, c_in_w, k = w.shape
    if c_in != c_in_w:
        raise ValueError("conv1d input has %d channels but kernel expects %d" % (c_in, c_in_w))
    if stride < 1 or padding < 0:
        raise ValueError("conv1d needs stride >= 1 and padding >= 0")
    padded = t + 2 * padding
    if k > padded:
        raise ValueError("Kernel of %d taps is longer than the padded input (%d samples)"
                         % (k, padded))
    if bias is not None and bias.shape != (c_out,):
        raise ValueError("conv1d bias must have shape (%d,)" % c_out)
    t_out = (padded - k) // stride + 1
    span = stride * (t_out - 1) + 1
    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding)))
    y = np.zeros((n, c_out, t_out))
    for j in range(k):
        y += np.einsum("oc,nct->not", w.values[:, :, j], xp[:, :, j:j + span:stride],
                       optimize=True)
    if bias is not None:
        y += bias.values[None, :, None]

    def _backward(g):
        gw = np.empty_like(w.values)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gw[:, :, j] = np.einsum("not,nct->oc", g, xp[:, :, j:j + span:stride],
                                    optimize=True)
            gxp[:, :, j:j + span:stride] += np.einsum("oc,not->nct", w.values[:, :, j], g,
                                                      optimize=True)
        grads = [gxp[:, :, padding:padding + t], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)
    parents = (x, w) if bias is None else (x, w, bias)
    return _result(y, parents, _backward, "conv1d")


def avg_pool1d(x: Tensor, k: int, s: int) -> Tensor:
    """``y[..., i] = mean(x[..., i*s : i*s + k])`` over the last axis."""
    t = x.shape[-1]
    if k < 1 or s < 1:
        raise ValueError("Pooling needs k >= 1 and s >= 1, got k=%d s=%d" % (k, s))
    if k > t:
        raise ValueError("Pooling window %d is longer than the input (%d samples)" % (k, t))
    t_out = (t - k) // s + 1
    span = s * (t_out - 1) + 1
    out = np.zeros(x.shape[:-1] + (t_out,))
    for j in range(k):
        out += x.values[..., j:j + span:s]
    out /= k

    def _backward(g):
        gx = np.zeros_like(x.values)
        for j in range(k):
            gx[..., j:j + span:s] += g / k
        return (gx,)
    return _result(out, (x,), _backward, "avg_pool1d")


# Finite-difference verification

def numerical_gradient(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to *leaf*."""
    grad = np.zeros_like(leaf.values)
    flat = leaf.values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = fn().item()
        flat[i] = saved - h
        minus = fn().item()
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Euclidean norm; 0 when both vanish."""
    scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale_)


def check_gradients(fn: Callable[[], Tensor], leaves: Iterable[Tensor],
                    h: float = 1e-5) -> Dict[str, float]:
    """Compare backward against central differences for every leaf.

    Returns the relative error per leaf, keyed by leaf name (or position).
    """
    leaves = list(leaves)
    for leaf in leaves:
        leaf.zero_grad()
    fn().backward()
    analytic = [leaf.grad.copy() for leaf in leaves]
    errors = {}
    for i, (leaf, grad) in enumerate(zip(leaves, analytic)):
        numeric = numerical_gradient(fn, leaf, h)
        errors[leaf.name or str(i)] = relative_error(grad, numeric)
    return errors
