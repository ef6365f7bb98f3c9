"""Tape-based reverse-mode differentiation over dense float64 arrays.

The op vocabulary is deliberately small: it covers exactly what the
session-aware encoder needs (linear maps, attention, layer norm, GELU,
embedding lookups, cosine temporal encodings and a masked cross-entropy).

A forward pass is recorded on a :class:`Tape`. Every op appends one node;
since nodes are appended in creation order the tape is already a
topological order, so ``Tape.backward`` just walks it in reverse.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPE = np.float64


class NumericsError(ArithmeticError):
    """Raised when an op sees NaN/Inf or is used outside its contract."""


class Tensor:
    """A node on a tape: a value, an accumulated gradient and a backward rule."""

    __slots__ = ("data", "grad", "tape", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, tape: "Tape | None" = None, requires_grad: bool = False,
                 name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def accumulate(self, g: np.ndarray) -> None:
        # out-of-place so gradients may alias views handed out by other nodes
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g


class Tape:
    """Records one forward pass. ``backward`` may be called once."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def leaf(self, data, name: str | None = None) -> Tensor:
        t = Tensor(data, self, requires_grad=True, name=name)
        self.nodes.append(t)
        return t

    def const(self, data) -> Tensor:
        return Tensor(data, self, requires_grad=False)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Back-propagate from a scalar and return gradients of named leaves.

        Named leaves that the loss does not depend on get zero gradients.
        """
        if self.consumed:
            raise NumericsError("backward already run on this recording")
        if loss.tape is not self:
            raise NumericsError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                _check_finite(node.grad, "backward")
        grads = {}
        for node in self.nodes:
            if node.name is not None and node._backward is None:
                g = node.grad if node.grad is not None else np.zeros_like(node.data)
                grads[node.name] = g
        return grads


class ParamStore:
    """Name -> array map of trainable parameters, iterated lexicographically."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        self._arrays[name] = np.ascontiguousarray(value, dtype=DTYPE)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return sorted(self._arrays)

    def items(self):
        for name in self.names():
            yield name, self._arrays[name]

    def num_parameters(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Create one named leaf per parameter on ``tape``."""
        return {name: tape.leaf(arr, name=name) for name, arr in self.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({name: arr.copy() for name, arr in self.items()})

    def equal(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n], other[n]) for n in self.names())


# ---------------------------------------------------------------------------
# helpers


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite value produced by {op}")


def _as_tensor(x, tape: Tape | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, tape, requires_grad=False)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    tape = _tape_of(*parents)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, tape, requires_grad=requires)
    if requires:
        out._parents = parents
        out._backward = backward
        if tape is not None:
            tape.nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a, None)
    def backward(g):
        a.accumulate(g * c)

    return _make(a.data * c, (a,), backward, "scale")


def cosine(x: Tensor) -> Tensor:
    x = _as_tensor(x, None)
    def backward(g):
        x.accumulate(-g * np.sin(x.data))

    return _make(np.cos(x.data), (x,), backward, "cosine")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (as in the original BERT code)."""
    x = _as_tensor(x, None)
    v = x.data
    v2 = v * v
    th = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        x.accumulate(g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * d_inner))

    return _make(0.5 * v * (1.0 + th), (x,), backward, "gelu")


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x, None)
    def backward(g):
        x.accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), backward, "sum")


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x, None)
    def backward(g):
        x.accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x, None)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x.accumulate(g.transpose(inverse))

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def concat_last_dim(a, b) -> Tensor:
    """Concatenate along the last axis; leading axes broadcast against each other."""
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    av = np.broadcast_to(a.data, lead + a.shape[-1:])
    bv = np.broadcast_to(b.data, lead + b.shape[-1:])
    na = a.shape[-1]

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g[..., :na], a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g[..., na:], b.shape))

    return _make(np.concatenate([av, bv], axis=-1), (a, b), backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules over leading axes."""
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b.accumulate(gb)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` at integer ``ids`` (any shape); result shape ids.shape + (d,)."""
    table = _as_tensor(table, None)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise NumericsError(
            f"embedding id out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table.accumulate(gt)

    return _make(table.data[ids], (table,), backward, "embedding_gather")


# ---------------------------------------------------------------------------
# normalisation / probabilities


def softmax_masked(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get exactly 0.

    ``mask`` broadcasts against ``logits`` and marks the entries that take part.
    """
    logits = _as_tensor(logits, None)
    keep = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if keep.shape[-1] == 0 or not keep.any(axis=-1).all():
        raise NumericsError("softmax row with every entry masked")
    z = np.where(keep, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        logits.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (logits,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    tape = _tape_of(x, gain, bias)
    x, gain, bias = (_as_tensor(v, tape) for v in (x, gain, bias))
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        if gain.requires_grad:
            gain.accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias.accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            x.accumulate(inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def cross_entropy_masked(logits: Tensor, labels, label_mask, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``logits[..., C]`` against integer ``labels`` where ``label_mask``.

    Positions outside the mask contribute nothing; ``mean`` divides by their count.
    """
    logits = _as_tensor(logits, None)
    labels = np.asarray(labels)
    sel = np.asarray(label_mask, dtype=bool)
    count = int(sel.sum())
    if count == 0:
        raise NumericsError("cross_entropy_masked: empty label mask")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = logits.data[sel]
    tgt = labels[sel]
    if tgt.min() < 0 or tgt.max() >= z.shape[-1]:
        raise NumericsError("cross_entropy_masked: label out of range")
    z = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(count)
    losses = log_norm - z[rows, tgt]
    denom = count if reduction == "mean" else 1
    value = losses.sum() / denom

    def backward(g):
        p = np.exp(z - log_norm[:, None])
        p[rows, tgt] -= 1.0
        full = np.zeros_like(logits.data)
        full[sel] = p * (float(g) / denom)
        logits.accumulate(full)

    return _make(np.asarray(value), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_check(
    loss_fn: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    sample_count: int = 50,
    seed: int = 0,
    include: Iterable[str] = (),
) -> float:
    """Worst relative error between tape gradients and central differences.

    Coordinates are drawn uniformly over all parameters; every name in
    ``include`` additionally contributes at least one coordinate. The
    relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    names = params.names()
    sizes = [params[n].size for n in names]
    total = sum(sizes)
    if total == 0:
        return 0.0

    tape = Tape()
    grads = tape.backward(loss_fn(tape, params.bind(tape)))

    rng = np.random.default_rng(seed)
    offsets = np.cumsum([0] + sizes)
    flat = rng.choice(total, size=min(sample_count, total), replace=False)
    coords = []
    for f in flat:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        coords.append((names[i], int(f - offsets[i])))
    for name in include:
        if params[name].size:
            coords.append((name, int(rng.integers(params[name].size))))

    def value() -> float:
        t = Tape()
        return loss_fn(t, params.bind(t)).item()

    worst = 0.0
    for name, j in coords:
        arr = params[name].reshape(-1)
        orig = arr[j]
        arr[j] = orig + eps
        up = value()
        arr[j] = orig - eps
        down = value()
        arr[j] = orig
        numeric = (up - down) / (2 * eps)
        analytic = float(grads[name].reshape(-1)[j])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
