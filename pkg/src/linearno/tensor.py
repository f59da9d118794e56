"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray. Every differentiable operation records a
tape entry (input references plus a backward rule closure) on the output
tensor; ``backward`` linearises the recorded graph into a topologically
ordered tape and replays it in reverse, accumulating gradients additively
into every tensor that requires them. A tape is consumed by its backward
pass: running it twice raises ``TapeError``.

Default precision is float64. float32 is supported for timing probes.
"""
from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf as _erf


class ShapeError(ValueError):
    """Operand shapes do not satisfy the operation's contract."""


class TapeError(RuntimeError):
    """Backward-pass misuse: consumed tape, missing seed, or no graph."""


class NumericsError(ArithmeticError):
    """A numeric invariant was violated (NaN/Inf, CFL breach, divergence)."""


DEFAULT_DTYPE = np.float64
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

class _GradMode(threading.local):
    """Per-thread tape switch, so concurrent runs cannot disable each
    other's gradient recording."""

    enabled = True


_grad_mode = _GradMode()


class no_grad:
    """Context manager that disables tape recording (evaluation passes)."""

    def __enter__(self):
        self._prev = _grad_mode.enabled
        _grad_mode.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev
        return False


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` by summing broadcast dimensions.

    Broadcasting follows trailing-dimension alignment with size-1
    expansion, so the inverse sums the extra leading axes and every axis
    where the target size is 1.
    """
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # Preserve an explicit float32 array; everything else is float64.
            if isinstance(data, np.ndarray) and data.dtype == np.float32:
                dtype = np.float32
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    # ---- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def check_finite(self, where=""):
        """Raise ``NumericsError`` if any element is NaN or Inf."""
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"non-finite values detected{' in ' + where if where else ''}")
        return self

    # ---- tape plumbing -------------------------------------------------
    def _accumulate(self, g):
        if self.grad is None:
            # Copy so later in-place accumulation never aliases an
            # intermediate that the tape still reads.
            self.grad = np.array(g, dtype=self.data.dtype)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Run the recorded tape in reverse from this tensor.

        ``seed`` is the output gradient; it may be omitted only for scalar
        outputs (implicitly 1.0). Gradients accumulate additively into
        ``.grad`` of every reachable tensor with ``requires_grad``.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if not self.requires_grad:
            raise TapeError("backward on a tensor that records no tape")
        if seed is None:
            if self.data.size != 1:
                raise TapeError("backward on a non-scalar output requires an explicit seed gradient")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {seed.shape} != output shape {self.data.shape}")

        tape = _topo_order(self)
        self._accumulate(seed)
        for node in reversed(tape):
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None  # release closures/intermediates eagerly
            node._consumed = True
            if node is not self and node._parents:
                node.grad = None  # interior gradients are not retained
        self._parents = ()

    # ---- arithmetic ----------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.data.dtype)

    def __add__(self, other):
        other = self._coerce(other)
        out = _node(np.add(self.data, other.data), (self, other))
        if out._parents:
            a, b = self, other

            def _bw(g):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.data.shape))

            out._backward = _bw
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        out = _node(np.subtract(self.data, other.data), (self, other))
        if out._parents:
            a, b = self, other

            def _bw(g):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g, b.data.shape))

            out._backward = _bw
        return out

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        out = _node(np.multiply(self.data, other.data), (self, other))
        if out._parents:
            a, b = self, other

            def _bw(g):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.data.shape))

            out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out = _node(np.divide(self.data, other.data), (self, other))
        if out._parents:
            a, b = self, other

            def _bw(g):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g * out.data / b.data, b.data.shape))

            out._backward = _bw
        return out

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        out = _node(-self.data, (self,))
        if out._parents:
            a = self
            out._backward = lambda g: a._accumulate(-g)
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ShapeError("power supports scalar exponents only")
        out = _node(self.data ** exponent, (self,))
        if out._parents:
            a = self

            def _bw(g):
                a._accumulate(g * exponent * a.data ** (exponent - 1))

            out._backward = _bw
        return out

    def exp(self):
        out = _node(np.exp(self.data), (self,))
        if out._parents:
            a = self
            out._backward = lambda g: a._accumulate(g * out.data)
        return out

    def log(self):
        out = _node(np.log(self.data), (self,))
        if out._parents:
            a = self
            out._backward = lambda g: a._accumulate(g / a.data)
        return out

    def sqrt(self):
        out = _node(np.sqrt(self.data), (self,))
        if out._parents:
            a = self
            out._backward = lambda g: a._accumulate(g * 0.5 / out.data)
        return out

    # ---- structural ops ------------------------------------------------
    def __matmul__(self, other):
        other = self._coerce(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ShapeError("matmul requires operands with at least 2 dimensions")
        if self.data.shape[-1] != other.data.shape[-2]:
            raise ShapeError(
                f"matmul inner dimensions differ: {self.data.shape} @ {other.data.shape}"
            )
        out = _node(np.matmul(self.data, other.data), (self, other))
        if out._parents:
            a, b = self, other

            def _bw(g):
                if a.requires_grad:
                    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                    a._accumulate(_unbroadcast(ga, a.data.shape))
                if b.requires_grad:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                    b._accumulate(_unbroadcast(gb, b.data.shape))

            out._backward = _bw
        return out

    def matmul(self, other):
        return self.__matmul__(other)

    def transpose2(self):
        """Swap the trailing two dimensions."""
        return self.swapaxes(-1, -2)

    def swapaxes(self, ax1, ax2):
        if self.data.ndim < 2:
            raise ShapeError("swapaxes requires at least 2 dimensions")
        out = _node(np.swapaxes(self.data, ax1, ax2), (self,))
        if out._parents:
            a = self
            out._backward = lambda g: a._accumulate(np.swapaxes(g, ax1, ax2))
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = _node(self.data.reshape(shape), (self,))
        if out._parents:
            a = self
            out._backward = lambda g: a._accumulate(g.reshape(old))
        return out

    def take(self, indices, axis=0):
        """Gather rows (or slices along ``axis``) by integer index."""
        indices = np.asarray(indices, dtype=np.int64)
        out = _node(np.take(self.data, indices, axis=axis), (self,))
        if out._parents:
            a = self

            def _bw(g):
                full = np.zeros_like(a.data)
                np.add.at(np.swapaxes(full, 0, axis), indices, np.swapaxes(g, 0, axis))
                a._accumulate(full)

            out._backward = _bw
        return out

    def sum(self, axis=None, keepdims=False):
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._parents:
            a = self
            out._backward = _reduce_backward(a, axis, keepdims)
        return out

    def mean(self, axis=None, keepdims=False):
        out = _node(self.data.mean(axis=axis, keepdims=keepdims), (self,))
        if out._parents:
            a = self
            count = a.data.size if axis is None else np.prod(
                [a.data.shape[ax] for ax in _normalize_axes(axis, a.data.ndim)]
            )
            inner = _reduce_backward(a, axis, keepdims, scale=1.0 / count)
            out._backward = inner
        return out


def _normalize_axes(axis, ndim):
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _reduce_backward(a, axis, keepdims, scale=1.0):
    def _bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=_normalize_axes(axis, a.data.ndim))
        a._accumulate(np.broadcast_to(g * scale, a.data.shape))

    return _bw


def _node(data, parents):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward = None
    out._consumed = False
    if _grad_mode.enabled:
        parents = tuple(p for p in parents if p.requires_grad or p._parents)
    else:
        parents = ()
    out._parents = parents
    out.requires_grad = bool(parents)
    return out


def _topo_order(root):
    """Tape in topological order: every node's parents precede it."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


# ---- composite / primitive functions -----------------------------------

def softmax(t, axis=-1):
    """Numerically stable softmax along ``axis``; rows sum to one."""
    x = t.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (t,))
    if out._parents:
        def _bw(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            t._accumulate(y * (g - dot))

        out._backward = _bw
    return out


def layer_norm(t, gain, bias, eps=1e-5):
    """Layer normalisation over the last dimension with affine parameters."""
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    out = _node(y, (t, gain, bias))
    if out._parents:
        d = x.shape[-1]

        def _bw(g):
            if gain.requires_grad:
                gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
            if bias.requires_grad:
                bias._accumulate(_unbroadcast(g, bias.data.shape))
            if t.requires_grad or t._parents:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                t._accumulate((dxhat - m1 - xhat * m2) * inv)

        out._backward = _bw
    return out


def gelu(t):
    """Exact Gaussian-error GELU: x * Phi(x) with Phi the standard normal CDF."""
    x = t.data
    phi = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = _node(x * phi, (t,))
    if out._parents:
        def _bw(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            t._accumulate(g * (phi + x * pdf))

        out._backward = _bw
    return out


def concat(tensors, axis=-1):
    """Concatenate tensors along ``axis`` (default: last dimension)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _node(data, tuple(tensors))
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def _bw(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad or t._parents:
                    t._accumulate(piece)

        out._backward = _bw
    return out


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
