"""A small reverse-mode differentiation engine over numpy arrays.

Every :class:`Tensor` records the op that produced it. Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse
topological order and accumulates ``.grad`` on leaf tensors created with
``requires_grad=True``.

Only the operations the matching pipeline needs are provided; each one
returns gradients for all of its tensor inputs.
"""

import contextlib

import numpy as np

from . import _kernels

_GRAD_ENABLED = True
_BRANCH_LOG = None


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def record_branches():
    """Collect the branch choices (relu masks, max indices) made while active.

    Two evaluations with equal logs lie on the same smooth piece, which is
    what a central difference needs.
    """
    global _BRANCH_LOG
    prev, _BRANCH_LOG = _BRANCH_LOG, []
    try:
        yield _BRANCH_LOG
    finally:
        _BRANCH_LOG = prev


def same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _log_branch(choice):
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(choice)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction helpers ---------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- backward ---------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        a = self
        return Tensor._make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    @property
    def T(self):
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,))

    def __getitem__(self, idx):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(a.data[idx], (a,), bw)

    def reshape(self, *shape):
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        return Tensor._make(
            a.data.sum(axis=axis, keepdims=keepdims),
            (a,),
            lambda g: (_expand(g, a.shape, axis, keepdims).copy(),),
        )

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis):
        """Max along one axis; the gradient goes to the first maximal entry."""
        a = self
        idx = np.argmax(a.data, axis=axis)
        _log_branch(idx)
        out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
        out = np.squeeze(out, axis=axis)

        def bw(g):
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            return (full,)

        return Tensor._make(out, (a,), bw)

    # -- elementwise ------------------------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: (g * out,))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        """Square root whose gradient is taken as 0 where the input is 0."""
        a = self
        out = np.sqrt(a.data)
        safe = np.where(out > 0, out, 1.0)
        return Tensor._make(out, (a,), lambda g: (np.where(out > 0, g / (2.0 * safe), 0.0),))

    def relu(self):
        a = self
        mask = a.data > 0
        _log_branch(mask)
        return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))

    def sigmoid(self):
        a = self
        out = _sigmoid(a.data)
        return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))

    def softplus(self):
        """log(1 + exp(x)), evaluated stably."""
        a = self
        x = a.data
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        return Tensor._make(out, (a,), lambda g: (g * _sigmoid(x),))

    def softmax(self, axis=-1):
        a = self
        z = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)
        return Tensor._make(
            out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
        )

    def log_softmax(self, axis=-1):
        a = self
        z = a.data - a.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = z - lse
        sm = np.exp(out)
        return Tensor._make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def grad_reverse(x, coeff=1.0):
    """Identity forward; backward multiplies the incoming gradient by ``-coeff``."""
    x = as_tensor(x)
    return Tensor._make(x.data.copy(), (x,), lambda g: (-coeff * g,))


def sinkhorn(x, iterations):
    """Differentiable Sinkhorn layer over ``exp(x)``; unrolled iterations are
    differentiated exactly."""
    x = as_tensor(x)
    out, hist = _kernels.sinkhorn_forward(x.data, iterations)
    return Tensor._make(out, (x,), lambda g: (_kernels.sinkhorn_backward(g, out, hist),))


def pairwise_mlp(a, b, w, c):
    """``out[i, j] = relu(a[i] + b[j]) . w + c`` without materializing the
    ``Ns x Nt x H`` hidden tensor."""
    a, b, w, c = (as_tensor(t) for t in (a, b, w, c))
    out = _kernels.pairwise_mlp_forward(a.data, b.data, w.data, float(c.data.reshape(-1)[0]))
    if _BRANCH_LOG is not None:
        _log_branch(a.data[:, None, :] + b.data[None, :, :] > 0)

    def bw(g):
        ga, gb, gw, gc = _kernels.pairwise_mlp_backward(g, a.data, b.data, w.data)
        return ga, gb, gw, np.full(c.shape, gc)

    return Tensor._make(out, (a, b, w, c), bw)
