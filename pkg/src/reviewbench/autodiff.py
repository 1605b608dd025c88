"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever one of their inputs requires a gradient. Outside a
tape they only compute values, which is how evaluation runs.

Broadcasting is limited to one case: in binary elementwise ops the second
operand's shape may be a trailing suffix of the first's (a bias row, or a
scalar). Everything else must match exactly.
"""

from __future__ import annotations

import contextvars
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("reviewbench_tape", default=None)

CKPT_MAGIC = b"RBCKPT01"


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        value = np.asarray(value)
        if value.dtype.kind in "iub":
            value = value.astype(np.float64)
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; ``backward`` replays it in reverse.

    With ``track_kinks`` set, non-smooth ops (relu, max) also log their
    branch pattern so the gradient checker can detect perturbations that
    cross a kink.
    """

    def __init__(self, track_kinks: bool = False):
        self.nodes: list[_Node] = []
        self.track_kinks = track_kinks
        self.kinks: list[np.ndarray] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Populate ``.grad`` of every tensor that ``loss`` depends on.

        Gradients of all tensors on this tape are reset first, so calling
        this twice gives identical results. Tensors in ``params`` that the
        loss does not reach receive zero gradients.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            node.output.grad = None
            for t in node.inputs:
                t.grad = None
        for p in params:
            p.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            for t, gt in zip(node.inputs, node.backward(g)):
                if gt is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(gt, dtype=t.value.dtype, copy=True).reshape(t.shape)
                else:
                    t.grad += gt
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.value)


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    tape = _ACTIVE.get()
    if tape is None:
        raise RuntimeError("backward() called outside a Tape context; use tape.backward(loss)")
    tape.backward(loss, params)


def _record(value: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor(value)
    tape = _ACTIVE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(inputs, out, fn))
    return out


def _kink(mask: np.ndarray) -> None:
    tape = _ACTIVE.get()
    if tape is not None and tape.track_kinks:
        tape.kinks.append(mask)


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.value.ndim <= a.value.ndim and a.shape[a.value.ndim - b.value.ndim :] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.value.ndim > a.value.ndim:
        a, b = b, a
    _check_suffix(a, b, "add")
    return _record(a.value + b.value, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.value.ndim > a.value.ndim:
        a, b = b, a
    _check_suffix(a, b, "mul")
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, _reduce_to(g * av, b.shape)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    _kink(mask)
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def dropout(a, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record(a.value * keep, (a,), lambda g: (g * keep,))


# ----------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """(..., n) @ (n, m) -> (..., m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.value, b.value

    def back(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1]) if b.requires_grad else None
        return ga, gb

    return _record(av @ bv, (a, b), back)


def dot(a, b) -> Tensor:
    """Inner product over the last axis: (..., k), (..., k) -> (...)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value
    return _record(
        np.einsum("...k,...k->...", av, bv),
        (a, b),
        lambda g: (g[..., None] * bv, g[..., None] * av),
    )


# ----------------------------------------------------------------- reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    if axis is None:
        out = np.asarray(np.sum(a.value, dtype=np.float64), dtype=a.value.dtype)
        return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape),))
    axis = axis % a.value.ndim
    out = np.sum(a.value, axis=axis, dtype=np.float64).astype(a.value.dtype)
    return _record(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    return mul(sum(a), 1.0 / max(1, a.size))


def sum_squares(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    out = np.asarray(np.dot(av.ravel().astype(np.float64), av.ravel()), dtype=av.dtype)
    return _record(out, (a,), lambda g: (2.0 * g * av,))


def mse_loss(pred, target) -> Tensor:
    """Mean squared error against a constant target, accumulated in float64."""
    pred = as_tensor(pred)
    target = np.asarray(target.value if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    if pred.size == 0:
        raise ShapeError("mse_loss of an empty batch")
    diff = pred.value.astype(np.float64) - target
    n = diff.size
    out = np.asarray(np.dot(diff.ravel(), diff.ravel()) / n, dtype=pred.value.dtype)
    return _record(out, (pred,), lambda g: ((2.0 / n) * g * diff,))


def max_over_time(a, axis: int = -2) -> Tensor:
    """Max over the time axis of a (..., T, n) tensor; the gradient goes to the first argmax."""
    a = as_tensor(a)
    axis = axis % a.value.ndim
    idx = np.argmax(a.value, axis=axis)
    _kink(idx)
    out = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        ga = np.zeros_like(a.value)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _record(out, (a,), back)


# ------------------------------------------------------------------- softmax


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; masked-out entries get weight 0 and an all-masked slice is all zeros."""
    a = as_tensor(a)
    x = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    z = np.sum(e, axis=axis, keepdims=True, dtype=np.float64)
    y = np.divide(e, z, out=np.zeros_like(e), where=z > 0).astype(a.value.dtype)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _record(y, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True, dtype=np.float64))
    y = (x - lse).astype(x.dtype)
    p = np.exp(y)
    return _record(y, (a,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


def weighted_sum(weights, values) -> Tensor:
    """Attention pooling: (..., n) weights over (..., n, d) values -> (..., d)."""
    weights, values = as_tensor(weights), as_tensor(values)
    if values.shape[:-1] != weights.shape:
        raise ShapeError(f"weighted_sum: shapes {weights.shape} and {values.shape} are incompatible")
    wv, vv = weights.value, values.value
    return _record(
        np.einsum("...r,...rf->...f", wv, vv),
        (weights, values),
        lambda g: (np.einsum("...f,...rf->...r", g, vv), wv[..., None] * g[..., None, :]),
    )


# ------------------------------------------------------------------ indexing


def embed_lookup(table, ids) -> Tensor:
    """Rows of a (V, d) table: ``ids`` of any shape -> ids.shape + (d,)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-d, got {table.shape}")

    def back(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(table.value[ids], (table,), back)


def take(a, rows, cols) -> Tensor:
    """Elements ``a[rows[j], cols[j]]`` of a 2-d tensor."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def back(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _record(a.value[rows, cols], (a,), back)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].value.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.value.ndim != ndim or any(t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} are incompatible")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(
        np.concatenate([t.value for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def conv1d(seq, filters, bias=None) -> Tensor:
    """'Same'-padded 1-d convolution: (B, T, n_in) * (w, n_in, n_out) -> (B, T, n_out), w odd."""
    seq, filters = as_tensor(seq), as_tensor(filters)
    if seq.value.ndim != 3 or filters.value.ndim != 3 or seq.shape[2] != filters.shape[1]:
        raise ShapeError(f"conv1d: shapes {seq.shape} and {filters.shape} are incompatible")
    w, n_in, n_out = filters.shape
    if w % 2 != 1:
        raise ShapeError(f"conv1d: filter width must be odd, got {w}")
    B, T, _ = seq.shape
    half = w // 2
    padded = np.pad(seq.value, ((0, 0), (half, half), (0, 0)))
    cols = np.concatenate([padded[:, j : j + T, :] for j in range(w)], axis=2)  # (B, T, w*n_in)
    wmat = filters.value.reshape(w * n_in, n_out)
    out = cols @ wmat
    inputs = (seq, filters)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (n_out,):
            raise ShapeError(f"conv1d: bias shape {bias.shape} does not match {n_out} filters")
        out = out + bias.value
        inputs = (seq, filters, bias)

    def back(g):
        gf = None
        if filters.requires_grad:
            gf = (cols.reshape(-1, w * n_in).T @ g.reshape(-1, n_out)).reshape(w, n_in, n_out)
        gs = None
        if seq.requires_grad:
            gcols = (g @ wmat.T).reshape(B, T, w, n_in)
            gp = np.zeros_like(padded)
            for j in range(w):
                gp[:, j : j + T, :] += gcols[:, :, j, :]
            gs = gp[:, half : half + T, :]
        grads = [gs, gf]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return _record(out, inputs, back)


def conv_relu_max(seq, filters) -> Tensor:
    """relu(max over time of conv1d(seq, filters)): (B, T, n_in) * (w, n_in, n_out) -> (B, n_out).

    Same value and gradient as composing :func:`conv1d`, :func:`relu` and
    :func:`max_over_time` (relu is monotone, so it commutes with the max), but
    the backward pass only touches the winning window of each filter.
    """
    seq, filters = as_tensor(seq), as_tensor(filters)
    if seq.value.ndim != 3 or filters.value.ndim != 3 or seq.shape[2] != filters.shape[1]:
        raise ShapeError(f"conv_relu_max: shapes {seq.shape} and {filters.shape} are incompatible")
    w, n_in, n_out = filters.shape
    if w % 2 != 1:
        raise ShapeError(f"conv_relu_max: filter width must be odd, got {w}")
    B, T, _ = seq.shape
    half = w // 2
    padded = np.pad(seq.value, ((0, 0), (half, half), (0, 0)))
    wv = filters.value
    conv = padded[:, 0:T, :] @ wv[0]
    for j in range(1, w):
        conv += padded[:, j : j + T, :] @ wv[j]
    idx = np.argmax(conv, axis=1)  # (B, n_out)
    peak = np.take_along_axis(conv, idx[:, None, :], axis=1)[:, 0, :]
    live = peak > 0
    _kink(idx)
    _kink(live)
    rows = np.arange(B)[:, None]

    def back(g):
        g = g * live
        gf = np.empty_like(wv) if filters.requires_grad else None
        gp = np.zeros_like(padded) if seq.requires_grad else None
        for j in range(w):
            if gf is not None:
                gf[j] = np.einsum("bf,bfc->cf", g, padded[rows, idx + j, :])
            if gp is not None:
                flat = (rows * padded.shape[1] + idx + j).ravel()
                contrib = (g[:, :, None] * wv[j].T[None, :, :]).reshape(-1, n_in)
                np.add.at(gp.reshape(-1, n_in), flat, contrib)
        return (None if gp is None else gp[:, half : half + T, :]), gf

    return _record(np.where(live, peak, 0.0), (seq, filters), back)


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    worst_rel_error: float
    checked: int
    excluded: int
    tol: float
    worst_param: str | None = None

    @property
    def passed(self) -> bool:
        return self.worst_rel_error < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-4,
    tol: float = 1e-3,
    max_coords: int = 200,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must be deterministic and rebuild its graph on every call. At most
    ``max_coords`` coordinates per parameter are sampled. A coordinate whose
    perturbation changes any relu/max branch is excluded as sitting on a
    non-differentiable point. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    rng = np.random.default_rng(seed)
    with Tape(track_kinks=True) as tape:
        loss = f()
    tape.backward(loss, params.values())
    analytic = {name: p.grad.copy() for name, p in params.items()}
    base_kinks = tape.kinks

    def evaluate():
        with Tape(track_kinks=True) as t:
            val = float(f().value)
        return val, t.kinks

    worst, worst_name, checked, excluded = 0.0, None, 0, 0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up, k_up = evaluate()
            flat[c] = orig - step
            down, k_down = evaluate()
            flat[c] = orig
            if not (_same_kinks(base_kinks, k_up) and _same_kinks(base_kinks, k_down)):
                excluded += 1
                continue
            num = (up - down) / (2 * step)
            ana = float(analytic[name].reshape(-1)[c])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            if rel > worst:
                worst, worst_name = rel, name
    return GradCheckReport(worst, checked, excluded, tol, worst_name)


def _same_kinks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


# ------------------------------------------------------------- checkpoints


def save_params(params: Mapping[str, np.ndarray], path: str | Path) -> None:
    """Flat binary keyed by name.

    Layout: magic, uint32 count, then per entry: uint32 name length, utf-8
    name, uint32 ndim, ndim x uint64 extents, row-major little-endian float64.
    """
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    pos = 8
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return out
