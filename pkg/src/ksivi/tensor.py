"""Dense float64 tensors with a reverse-mode gradient tape.

Only the handful of primitives needed by small MLPs and the kernel objective
are supported: add, multiply, divide, matmul, transpose, reshape, relu, exp, log,
power, sum, and implicit numpy broadcasting in the binary ops.  Everything
else (subtraction, negation, sigmoid, softmax) is composed from these.

The free functions ``exp``, ``log``, ``relu``, ``sum``, ``transpose`` accept
either a :class:`Tensor` or a plain ndarray.  Code written against them (target
scores in particular) runs unchanged on numpy arrays, without any tape
overhead, and on tensors when gradients are needed.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Mlp",
    "backward",
    "tape",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "sum",
    "transpose",
    "reshape",
    "as_array",
    "finite_diff_check",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array node in a reverse-mode graph.

    Parameters
    ----------
    data : array_like
        Values; copied into a C-contiguous float64 array.
    requires_grad : bool
        Leaves created with ``requires_grad=True`` receive gradients from
        :func:`backward`.  Untracked tensors never accumulate a gradient.
    """

    # Make numpy defer to our reflected operators (ndarray @ Tensor etc.).
    __array_ufunc__ = None

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._op = "leaf"
        self.name = name

    @classmethod
    def _node(cls, data: np.ndarray, parents, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        tracked = tuple((p, fn) for p, fn in parents if p.requires_grad)
        out._parents = tracked
        out.requires_grad = bool(tracked)
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- primitives ------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.data, other.data
        out = a + b
        return Tensor._node(
            out,
            [
                (self, lambda g: _unbroadcast(g, a.shape)),
                (other, lambda g: _unbroadcast(g, b.shape)),
            ],
            "add",
        )

    def __mul__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.data, other.data
        return Tensor._node(
            a * b,
            [
                (self, lambda g: _unbroadcast(g * b, a.shape)),
                (other, lambda g: _unbroadcast(g * a, b.shape)),
            ],
            "mul",
        )

    def __truediv__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._node(
            out,
            [
                (self, lambda g: _unbroadcast(g / b, a.shape)),
                (other, lambda g: _unbroadcast(-g * out / b, b.shape)),
            ],
            "div",
        )

    def __matmul__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return Tensor._node(
            a @ b,
            [(self, lambda g: g @ b.T), (other, lambda g: a.T @ g)],
            "matmul",
        )

    def __pow__(self, p) -> "Tensor":
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(p)
        a = self.data
        return Tensor._node(a**p, [(self, lambda g: g * p * a ** (p - 1.0))], "pow")

    # -- composed ------------------------------------------------------
    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + _lift(other) * -1.0

    def __radd__(self, other) -> "Tensor":
        return _lift(other) + self

    def __rsub__(self, other) -> "Tensor":
        return _lift(other) + self * -1.0

    def __rmul__(self, other) -> "Tensor":
        return _lift(other) * self

    def __rtruediv__(self, other) -> "Tensor":
        return _lift(other) / self

    def __rmatmul__(self, other) -> "Tensor":
        return _lift(other) @ self

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._op = "const"
    out.name = None
    return out


def as_array(x) -> np.ndarray:
    """Underlying ndarray of a Tensor, or ``np.asarray(x)``."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    out = np.exp(x.data)
    return Tensor._node(out, [(x, lambda g: g * out)], "exp")


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    a = x.data
    return Tensor._node(np.log(a), [(x, lambda g: g / a)], "log")


def relu(x):
    """Rectified linear unit; the derivative at exactly 0 is taken as 0."""
    if not isinstance(x, Tensor):
        return np.maximum(x, 0.0)
    mask = x.data > 0.0
    return Tensor._node(np.where(mask, x.data, 0.0), [(x, lambda g: g * mask)], "relu")


def sigmoid(x):
    """Logistic function, stable for large ``|x|``."""
    if not isinstance(x, Tensor):
        return expit(x)
    out = expit(x.data)
    return Tensor._node(out, [(x, lambda g: g * out * (1.0 - out))], "sigmoid")


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.data.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Tensor._node(np.asarray(out, dtype=np.float64), [(x, grad_fn)], "sum")


def reshape(x, shape):
    if not isinstance(x, Tensor):
        return np.reshape(x, shape)
    old = x.data.shape
    return Tensor._node(x.data.reshape(shape), [(x, lambda g: g.reshape(old))], "reshape")


def transpose(x):
    if not isinstance(x, Tensor):
        return np.asarray(x).T
    return Tensor._node(x.data.T, [(x, lambda g: g.T)], "transpose")


def tape(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root`` in topological order (leaves first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``root`` w.r.t. every tracked leaf.

    The returned mapping is keyed by leaf tensor; each leaf's ``.grad`` is also
    overwritten with its gradient.  The graph is not consumed, so calling
    ``backward`` again on the same root reproduces the same gradients.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward expects a Tensor")
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not depend on any tracked leaf")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            leaves[node] = g
            node.grad = g
            continue
        for parent, fn in node._parents:
            contrib = fn(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return leaves


class Mlp:
    """Fully connected ReLU network, identity on the output layer.

    ``widths = [w0, ..., wL]``; weights are stored as ``(w_in, w_out)``
    matrices so a row-batch ``X`` maps through ``X @ W + b``.
    Weights start uniform on ``±1/sqrt(fan_in)``, biases at zero.
    ``zero_last=True`` zeros the output layer so the network starts as the
    zero map.
    """

    def __init__(self, widths: Sequence[int], rng=None, zero_last: bool = False):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least two positive widths, got {widths}")
        rng = np.random.default_rng(rng)
        self.widths = widths
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(Tensor(w, requires_grad=True, name=f"W{i}"))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"b{i}"))

    @property
    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"W{i}", w), (f"b{i}", b)]
        return out

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        """Apply the network to a row batch (or a single vector)."""
        single = as_array(x).ndim == 1
        if single:
            x = reshape(x, (1, -1))
        if as_array(x).shape[-1] != self.widths[0]:
            raise ValueError(
                f"input width {as_array(x).shape[-1]} does not match first layer {self.widths[0]}"
            )
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < n_layers - 1:
                h = relu(h)
        if single:
            return reshape(h, (-1,))
        return h

    def forward_numpy(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward pass with the current parameter values."""
        h = np.asarray(x, dtype=np.float64)
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        return h


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` maps a tracked tensor to a scalar tensor.  The error per coordinate
    is ``|g_ad - g_fd| / (|g_fd| + 1e-8)``.
    """
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    out = fn(x)
    if not isinstance(out, Tensor) or not out.requires_grad:
        g_ad = np.zeros_like(x0)
        f0 = float(as_array(out))
    else:
        f0 = float(out.data)
        g_ad = backward(out).get(x, np.zeros_like(x0))
    if not np.isfinite(f0):
        raise FloatingPointError("function is not finite at the base point")
    g_fd = np.zeros_like(x0)
    flat = g_fd.reshape(-1)
    for i in range(x0.size):
        e = np.zeros(x0.size)
        e[i] = step
        e = e.reshape(x0.shape)
        fp = float(as_array(fn(Tensor(x0 + e))))
        fm = float(as_array(fn(Tensor(x0 - e))))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        flat[i] = (fp - fm) / (2.0 * step)
    err = np.abs(g_ad - g_fd) / (np.abs(g_fd) + 1e-8)
    return float(err.max()) if err.size else 0.0


def flatten(arrays: Iterable[np.ndarray]) -> np.ndarray:
    """Concatenate a sequence of arrays into one flat vector."""
    arrays = [np.ravel(a) for a in arrays]
    return np.concatenate(arrays) if arrays else np.zeros(0)
