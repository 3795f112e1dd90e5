"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the language-embedding network needs are provided. There
is no implicit broadcasting: every op checks its operand shapes and raises
``ShapeError`` naming the op and both shapes on mismatch. Bias addition and
frame tiling exist as explicit ops instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values produced by {where}")


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """An n-d float64 array with a lazily allocated gradient buffer.

    Leaf tensors created with ``requires_grad=True`` receive gradients from
    :meth:`backward`. Intermediate tensors keep a reference to their parents and
    a closure mapping the upstream gradient to one gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, f"tensor init ({name or 'anonymous'})")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    def graph(self) -> list[GraphRecord]:
        return build_graph(self)

    def backward(self) -> None:
        backward(self)


@dataclass(frozen=True)
class GraphRecord:
    output: int
    inputs: tuple[int, ...]
    op: str


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def build_graph(root: Tensor) -> list[GraphRecord]:
    """Topologically ordered records of the graph ending at ``root``.

    Tensor ids are positions in the returned order, so two graphs built from
    the same op sequence compare equal.
    """
    order = _topo_order(root)
    index = {id(t): i for i, t in enumerate(order)}
    return [
        GraphRecord(index[id(t)], tuple(index[id(p)] for p in t._parents), t.op) for t in order
    ]


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1 or root.data.ndim > 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    order = _topo_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, f"backward of {node.op}")
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return None


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, rule) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b`` of shape (K,) along the last axis of ``x`` (..., K)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, (x, b), "add_bias", lambda g: (g, g.sum(axis=lead)))


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-lam`` backward."""
    if not lam >= 0:
        raise ValueError(f"grad_reverse: lambda must be nonnegative, got {lam}")
    x = _as_tensor(x)
    return _make(x.data.copy(), (x,), "grad_reverse", lambda g: (g * -lam,))


# ---------------------------------------------------------------- reductions / reshaping


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), "sum", lambda g: (np.full(shape, float(g)),))


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    ax = axis % x.data.ndim
    n = x.shape[ax]
    shape = x.shape

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return _make(x.data.mean(axis=ax), (x,), "mean", rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    nd = tensors[0].data.ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def rule(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", rule)


def take_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    x = _as_tensor(x)
    k = x.shape[-1]
    if not 0 <= start < stop <= k:
        raise ShapeError(f"take_last: slice {start}:{stop} out of range for shape {x.shape}")
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop].copy(), (x,), "take_last", rule)


def tile_frames(h: Tensor, n_frames: int) -> Tensor:
    """Repeat an (N, C) tensor over a new time axis, giving (N, T, C)."""
    h = _as_tensor(h)
    if h.data.ndim != 2:
        raise ShapeError(f"tile_frames: expected (N, C), got {h.shape}")
    out = np.repeat(h.data[:, None, :], n_frames, axis=1)
    return _make(out, (h,), "tile_frames", lambda g: (g.sum(axis=1),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Valid dilated 1-D convolution over time.

    ``x`` is (T, C_in) or batched (N, T, C_in); ``kernel`` is (k, C_in, C_out).
    ``out[t, o] = sum_{j,c} x[t + j*dilation, c] * kernel[j, c, o] + bias[o]``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if dilation < 1 or int(dilation) != dilation:
        raise ValueError(f"conv1d: dilation must be a positive integer, got {dilation}")
    if kernel.data.ndim != 3:
        raise ShapeError(f"conv1d: kernel must be (k, C_in, C_out), got {kernel.shape}")
    single = x.data.ndim == 2
    xd = x.data[None] if single else x.data
    if xd.ndim != 3 or xd.shape[2] != kernel.shape[1]:
        raise ShapeError(f"conv1d: shape mismatch {x.shape} vs {kernel.shape}")
    k, c_in, c_out = kernel.shape
    n, t_in, _ = xd.shape
    span = (k - 1) * dilation
    t_out = t_in - span
    if t_out < 1:
        raise ShapeError(
            f"conv1d: sequence of length {t_in} is shorter than the receptive field {span + 1}"
        )
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {bias.shape} vs kernel {kernel.shape}")

    cols = np.concatenate(
        [xd[:, j * dilation : j * dilation + t_out, :] for j in range(k)], axis=2
    ).reshape(n * t_out, k * c_in)
    w = kernel.data.reshape(k * c_in, c_out)
    out = cols @ w
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, t_out, c_out)
    if single:
        out = out[0]

    def rule(g):
        g2 = g.reshape(n * t_out, c_out)
        dcols = (g2 @ w.T).reshape(n, t_out, k, c_in)
        dx = np.zeros_like(xd)
        for j in range(k):
            dx[:, j * dilation : j * dilation + t_out, :] += dcols[:, :, j, :]
        dw = (cols.T @ g2).reshape(k, c_in, c_out)
        grads = [dx[0] if single else dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, "conv1d", rule)


STATS_EPS = 1e-8


def statistics_pooling(x: Tensor, eps: float = STATS_EPS) -> Tensor:
    """Concatenate the temporal mean and std: (T, C) -> (2C,), (N, T, C) -> (N, 2C)."""
    x = _as_tensor(x)
    if x.data.ndim not in (2, 3) or x.shape[-2] < 1:
        raise ShapeError(f"statistics_pooling: expected (T, C) or (N, T, C), got {x.shape}")
    t = x.shape[-2]
    mean = x.data.mean(axis=-2, keepdims=True)
    centered = x.data - mean
    std = np.sqrt((centered**2).mean(axis=-2, keepdims=True) + eps)
    out = np.concatenate([mean.squeeze(-2), std.squeeze(-2)], axis=-1)
    c = x.shape[-1]

    def rule(g):
        g_mean = np.expand_dims(g[..., :c], -2)
        g_std = np.expand_dims(g[..., c:], -2)
        return (g_mean / t + g_std * centered / (t * std),)

    return _make(out, (x,), "statistics_pooling", rule)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: shape mismatch {logits.shape} vs labels {labels.shape}"
        )
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k}), got {labels}")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.array((log_norm - z[rows, labels]).mean())

    def rule(g):
        d = np.exp(z - log_norm[:, None])
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return _make(loss, (logits,), "softmax_cross_entropy", rule)
