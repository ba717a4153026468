"""Dense tensors with tape-based reverse-mode differentiation.

Only the primitives the two towers need are provided: affine layers, ReLU,
embedding lookups and mean pooling, 1-D convolution with max-over-time
pooling, concatenation, row gathers, L2 normalization, cosine / dot scores
and the pairwise hinge loss. There is no general broadcasting; every op
works on a single vector or on a batch of row vectors.

Operations are recorded on the innermost active :class:`Tape`. Outside a
tape, the same functions run forward-only with no bookkeeping.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-8

_state = threading.local()


class ShapeError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


def default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def shadow64():
    """Create new tensors in float64 for the duration of the block."""
    previous = default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """Row-major float array. ``Tensor(x)`` casts to the current default dtype."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        # asarray keeps 0-d inputs 0-d (ascontiguousarray would promote them)
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr if arr.flags.c_contiguous else arr.copy()

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = object.__new__(Tensor)
        t.data = array
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A named, trainable tensor with an accumulated gradient."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, value):
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence]
    branch: np.ndarray | None = None  # which piece of a piecewise op was taken


class Tape:
    """Ordered record of the primitive ops executed inside a ``with`` block."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _emit(op: str, inputs: tuple, out: np.ndarray, backward, branch=None) -> Tensor:
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None:
        tape.nodes.append(_Node(op, inputs, result, backward, branch))
    return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(tape: Tape, loss: Tensor) -> int:
    """Accumulate d(loss)/d(param) into ``grad`` of every reachable Parameter.

    Returns the number of tape nodes that received a gradient.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    visited = 0
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        visited += 1
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not isinstance(inp, Tensor):
                continue
            if isinstance(inp, Parameter):
                inp.grad += ig
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
    return visited


# -- elementwise / reductions -------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    x, y = a.data, b.data
    return _emit("mul", (a, b), x * y, lambda g: (g * y, g * x))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _emit("sum", (x,), x.data.sum(), lambda g: (np.full(shape, g, dtype=x.data.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return _emit(
        "mean", (x,), x.data.mean(), lambda g: (np.full(shape, g / n, dtype=x.data.dtype),)
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.data.dtype), lambda g: (g * mask,), mask)


# -- layers --------------------------------------------------------------------


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape [n] or [batch, n]."""
    if (
        W.data.ndim != 2
        or b.shape != (W.shape[0],)
        or x.data.ndim not in (1, 2)
        or x.shape[-1] != W.shape[1]
    ):
        raise ShapeError(f"affine: input shape {x.shape} incompatible with weight shape {W.shape} / bias {b.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T + b.data

    def grad(g):
        if xd.ndim == 1:
            return g @ Wd, np.outer(g, xd), g
        return g @ Wd, g.T @ xd, g.sum(axis=0)

    return _emit("affine", (x, W, b), out, grad)


def _scatter_rows(n_rows: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``out[index[i]] += values[i]`` with a deterministic summation order."""
    index = index.reshape(-1)
    values = values.reshape(index.size, -1)
    out = np.zeros((n_rows, values.shape[1]), dtype=values.dtype)
    if index.size:
        order = np.argsort(index, kind="stable")
        sorted_idx = index[order]
        starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
        out[sorted_idx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def take(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; gradients scatter-add back."""
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def grad(g):
        return (_scatter_rows(shape[0], idx, g).reshape(shape),)

    return _emit("take", (x,), x.data[idx], grad)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = tuple(parts)
    lead = {p.shape[:-1] for p in parts}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ: {[p.shape for p in parts]}")
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum(widths)[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=-1))

    return _emit("concat", parts, np.concatenate([p.data for p in parts], axis=-1), grad)


def _rows(ids) -> tuple[np.ndarray, bool]:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        return ids[None, :], True
    if ids.ndim != 2:
        raise ShapeError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
    return ids, False


def embedding_mean(table: Tensor, ids) -> Tensor:
    """Average the rows of ``table`` selected by ``ids``, ignoring id 0.

    Id 0 is both the out-of-vocabulary token and padding. A row with no
    known ids pools to the zero vector. Row 0 of the table never receives
    gradient.
    """
    ids, single = _rows(ids)
    mask = ids > 0
    counts = mask.sum(axis=1, keepdims=True)
    weights = (mask / np.maximum(counts, 1)).astype(table.data.dtype)
    out = np.einsum("bk,bkd->bd", weights, table.data[ids])
    shape = table.shape

    def grad(g):
        g2 = g[None, :] if single else g
        gt = _scatter_rows(shape[0], ids, weights[..., None] * g2[:, None, :])
        gt[0] = 0
        return (gt,)

    return _emit("embedding_mean", (table,), out[0] if single else out, grad)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` for a [batch, length] id array.

    Id 0 (OOV / padding) always maps to the zero vector, whatever row 0
    holds, and row 0 never receives gradient.
    """
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape
    out = table.data[ids]
    out[ids == 0] = 0

    def grad(g):
        gt = _scatter_rows(shape[0], ids, g)
        gt[0] = 0
        return (gt,)

    return _emit("embedding_lookup", (table,), out, grad)


def conv1d_max(x: Tensor, lengths, W: Tensor, b: Tensor) -> Tensor:
    """Valid 1-D convolution over time followed by max-over-time pooling.

    ``x`` is [batch, length, dim], ``W`` is [channels, width, dim]. Sequences
    shorter than the filter width are zero-padded to one window; empty
    sequences (length 0) pool to zeros and pass no gradient.
    """
    if x.data.ndim != 3 or W.data.ndim != 3 or W.shape[2] != x.shape[2] or b.shape != (W.shape[0],):
        raise ShapeError(f"conv1d_max: input shape {x.shape} incompatible with filter shape {W.shape} / bias {b.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    B, L, d = x.shape
    C, k, _ = W.shape
    Lp = max(L, k)
    xp = x.data if Lp == L else np.concatenate([x.data, np.zeros((B, Lp - L, d), x.data.dtype)], axis=1)
    T = Lp - k + 1
    Wd = W.data
    resp = np.broadcast_to(b.data, (B, T, C)).copy()
    for j in range(k):
        resp += xp[:, j : j + T] @ Wd[:, j, :].T
    n_valid = np.maximum(lengths, k) - k + 1
    invalid = np.arange(T)[None, :] >= n_valid[:, None]
    resp[invalid] = -np.inf
    arg = resp.argmax(axis=1)  # [B, C]
    out = np.take_along_axis(resp, arg[:, None, :], axis=1)[:, 0, :]
    empty = lengths == 0
    out[empty] = 0
    bidx = np.arange(B)[:, None]
    cidx = np.arange(C)[None, :]

    def grad(g):
        g = np.where(empty[:, None], 0, g)
        gb = g.sum(axis=0)
        # route each (row, channel) gradient to the window start it came from
        route = np.zeros((B, T, C), dtype=g.dtype)
        route[bidx, arg, cidx] = g
        gW = np.empty_like(Wd, dtype=g.dtype)
        gxp = np.zeros((B, Lp, d), dtype=g.dtype)
        flat_route = route.reshape(B * T, C)
        for j in range(k):
            seg = xp[:, j : j + T].reshape(B * T, d)
            gW[:, j, :] = flat_route.T @ seg
            gxp[:, j : j + T] += (flat_route @ Wd[:, j, :]).reshape(B, T, d)
        return gxp[:, :L], gW, gb

    return _emit("conv1d_max", (x, W, b), out, grad, arg)


# -- similarity and loss -------------------------------------------------------


def _norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt((v * v).sum(axis=-1, keepdims=True))


def l2_normalize(v: Tensor, fallback: bool = False) -> Tensor:
    """Scale each row to unit L2 norm.

    Rows with norm <= EPS raise :class:`DegenerateVectorError`, unless
    ``fallback`` is set, in which case they map to the first basis vector
    and pass no gradient.
    """
    vd = v.data
    n = _norms(vd)
    bad = n[..., 0] <= EPS
    if bad.any() and not fallback:
        raise DegenerateVectorError(f"cannot normalize vector with norm {float(n.min()):.3g}")
    safe = np.where(n > EPS, n, 1)
    y = vd / safe
    if bad.any():
        basis = np.zeros(vd.shape[-1], dtype=vd.dtype)
        basis[0] = 1
        y = np.where(bad[..., None], basis, y)

    def grad(g):
        gv = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(bad[..., None], 0, gv),)

    return _emit("l2_normalize", (v,), y.astype(vd.dtype), grad, bad)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner product: scalar for vectors, [batch] for matrices."""
    _same_shape("dot", a, b)
    x, y = a.data, b.data

    def grad(g):
        g = np.asarray(g)[..., None]
        return g * y, g * x

    return _emit("dot", (a, b), (x * y).sum(axis=-1), grad)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity."""
    _same_shape("cosine", a, b)
    x, y = a.data, b.data
    na, nb = _norms(x), _norms(y)
    if (na <= EPS).any() or (nb <= EPS).any():
        raise DegenerateVectorError("cosine of a zero-norm vector")
    c = (x * y).sum(axis=-1, keepdims=True) / (na * nb)

    def grad(g):
        g = np.asarray(g)[..., None]
        ga = g * (y / (na * nb) - c * x / (na * na))
        gb = g * (x / (na * nb) - c * y / (nb * nb))
        return ga, gb

    return _emit("cosine", (a, b), np.clip(c[..., 0], -1, 1), grad)


def hinge_rank_loss(r_pos, r_neg, margin: float = 1.0) -> Tensor:
    """``max(0, r_neg - r_pos + margin)``, elementwise; slope 0 at the kink."""
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    r_pos, r_neg = _as_tensor(r_pos), _as_tensor(r_neg)
    _same_shape("hinge_rank_loss", r_pos, r_neg)
    z = r_neg.data - r_pos.data + r_pos.data.dtype.type(margin)
    active = z > 0
    return _emit(
        "hinge_rank_loss",
        (r_pos, r_neg),
        np.where(active, z, 0).astype(z.dtype),
        lambda g: (-g * active, g * active),
        active,
    )


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int  # probes whose +/- step crossed a kink of a piecewise op


def _signature(fn) -> tuple[float, list]:
    with Tape() as tape:
        value = float(fn().data)
    return value, [n.branch for n in tape.nodes if n.branch is not None]


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_report(
    fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    skip_kinks: bool = True,
) -> GradCheckResult:
    """Compare tape gradients with central differences, in float64.

    ``fn`` must rebuild the scalar loss from ``params`` on every call.
    Relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    With ``skip_kinks``, a probe is discarded when either perturbed forward
    pass takes a different branch of some ReLU / max / hinge than the
    unperturbed pass: central differences across a kink do not estimate
    the derivative at the point. ``max_coords`` caps how many coordinates
    per parameter are probed (sampled with ``seed``).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    saved = [(p.data, p.grad) for p in params]
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    try:
        with shadow64():
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = np.zeros_like(p.data)
            with Tape() as tape:
                loss = fn()
            backward(tape, loss)
            base = [n.branch for n in tape.nodes if n.branch is not None]
            for p in params:
                flat = p.data.reshape(-1)
                analytic = p.grad.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + step
                    f_plus, sig_plus = _signature(fn)
                    flat[i] = orig - step
                    f_minus, sig_minus = _signature(fn)
                    flat[i] = orig
                    if skip_kinks and not (_same_branches(base, sig_plus) and _same_branches(base, sig_minus)):
                        skipped += 1
                        continue
                    numeric = (f_plus - f_minus) / (2 * step)
                    a = float(analytic[i])
                    worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
                    checked += 1
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data, p.grad = data, grad
    return GradCheckResult(worst, checked, skipped)


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error of tape gradients against central differences."""
    return grad_check_report(fn, params, step, max_coords, seed).max_rel_error
