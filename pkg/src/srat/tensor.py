"""Dense tensors with tape-based reverse-mode automatic differentiation.

The tape is rebuilt on every forward pass: each op closes over its inputs
and records a vector-Jacobian callback only when some input requires a
gradient, so inference-only passes carry no graph at all.

Storage defaults to float32; gradient checks and oracle code switch to
float64 through the ``precision`` context manager.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor value or gradient."""


class GraphError(RuntimeError):
    """Backward was called on an invalid graph (e.g. non-scalar root)."""


_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default storage dtype ('float32'/'float64')."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _check_finite(arr, context: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {context}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        _check_finite(arr, "tensor constructor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data, parents, vjp) -> Tensor:
    """Create a graph node; records the tape entry only if it is needed."""
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(data, "op output")
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")

    def vjp(g):
        return (g.T,)

    return _node(np.ascontiguousarray(a.data.T), (a,), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b with a row-broadcast bias of shape (n,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear shapes {x.shape} x {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias shape {b.shape} vs {(w.shape[1],)}")

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(x.data @ w.data + b.data, (x, w, b), vjp)


def _binary_shapes(a: Tensor, b: Tensor):
    """Scalar-or-equal broadcasting only; anything else is an error."""
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"incompatible shapes {a.shape} vs {b.shape}")


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape) if shape == () else grad.sum().reshape(shape)


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    _binary_shapes(a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _node(a.data + b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    _binary_shapes(a, b)

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, Tensor(np.asarray(s, dtype=a.data.dtype)))


def silu(x: Tensor) -> Tensor:
    # overflow-safe sigmoid: exp of a non-positive argument only
    pos = x.data >= 0
    e = np.exp(np.where(pos, -x.data, x.data))
    sig = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
    out = x.data * sig

    def vjp(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _node(out, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), vjp)


def elementwise(kind: str, *inputs) -> Tensor:
    """Dispatch table for the elementwise op family."""
    if kind == "add":
        return add(*inputs)
    if kind == "mul":
        return mul(*inputs)
    if kind == "silu":
        return silu(*inputs)
    if kind == "tanh":
        return tanh(*inputs)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def tensor_sum(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.full(x.shape, g.reshape(())),)

    return _node(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), vjp)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def vjp(g):
        return (np.full(x.shape, g.reshape(()) / n, dtype=x.data.dtype),)

    return _node(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), vjp)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = pred.size

    def vjp(g):
        s = 2.0 * g.reshape(()) / n
        return s * diff, -s * diff

    return _node(np.asarray(np.mean(diff * diff), dtype=pred.data.dtype),
                 (pred, target), vjp)


def concat(parts, axis: int = 1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero parts")
    widths = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for table {table.shape}")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(table.data[idx], (table,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate additively into existing leaf .grad arrays; interior
    node gradients are freed as soon as they have been propagated.
    """
    if loss.size != 1:
        raise GraphError("backward root must be scalar")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            topo.append(node)
            continue
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, "gradient")
        if node._vjp is None:
            node.grad = g.reshape(node.shape) if node.grad is None else node.grad + g.reshape(node.shape)
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(fn, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    Runs in float64 regardless of the ambient mode; ``fn`` must map a single
    tensor to a scalar tensor.
    """
    with precision("float64"):
        base = Tensor(x.data.astype(np.float64).copy(), requires_grad=True)
        loss = fn(base)
        if loss.size != 1:
            raise GraphError("grad_check target must be scalar-valued")
        backward(loss)
        analytic = np.zeros(base.shape) if base.grad is None else base.grad.copy()

        numeric = np.zeros_like(analytic)
        flat = base.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(Tensor(base.data.copy())).item()
            flat[i] = orig - eps
            down = fn(Tensor(base.data.copy())).item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
