"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A ``Tape`` records every operation executed while it is active; calling
``backward`` on a scalar result walks the record in exact reverse order and
accumulates gradients additively into the participating tensors. The op set
is deliberately small: dense linear algebra, elementwise arithmetic, and the
segment reductions a message-passing network needs (segment sum / mean and a
temperature softmax over contiguous segments).

Conventions:

* all values are float64; anything non-finite raises ``NonFiniteError`` as
  soon as it is produced,
* segment ids must be sorted (non-decreasing); builders sort once up front,
* a tape is single-threaded and is consumed by its first backward pass.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class NonFiniteError(EngineError):
    """A tensor value came out NaN or infinite."""


class ShapeError(EngineError):
    """Operands have incompatible shapes for the requested op."""


class TapeConsumedError(EngineError):
    """backward was called twice on the same tape without a new forward."""


def _check_finite(op: str, values: np.ndarray) -> None:
    if values.size == 0:
        return
    s = values.sum()
    if not np.isfinite(s):
        bad = int(np.count_nonzero(~np.isfinite(values)))
        raise NonFiniteError(f"{op}: produced {bad} non-finite values")


class Tensor:
    """A dense float64 array plus an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad", "name", "_tape", "_is_leaf")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(values, dtype=np.float64)
        _check_finite(name or "tensor", arr)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.values.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _OpRecord:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; backward traverses it in exact reverse order."""

    def __init__(self):
        self.records: list[_OpRecord] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeConsumedError(
                "tape already consumed by a backward pass; run a new forward"
            )
        if loss.values.shape != ():
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.values.shape}"
            )
        self.consumed = True
        loss.grad = np.ones((), dtype=np.float64)
        for rec in reversed(self.records):
            out_grad = rec.output.grad
            if out_grad is None:
                continue
            grads = rec.backward_fn(out_grad)
            for t, g in zip(rec.inputs, grads):
                if g is None or not (t.requires_grad or not t._is_leaf):
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.values)
                t.grad += g


_ACTIVE_TAPE: Tape | None = None


class no_grad:
    """Context manager that disables recording (evaluation fast path)."""

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss."""
    if loss._tape is None:
        raise EngineError("loss is not attached to a tape; run inside `with Tape()`")
    loss._tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, output_values: np.ndarray, inputs: tuple[Tensor, ...],
            backward_fn) -> Tensor:
    _check_finite(op, output_values)
    out = Tensor.__new__(Tensor)
    out.values = output_values
    out.grad = None
    out.name = op
    tape = _ACTIVE_TAPE
    tracked = tape is not None and any(t.requires_grad or not t._is_leaf for t in inputs)
    out.requires_grad = False
    out._is_leaf = not tracked
    out._tape = tape if tracked else None
    if tracked:
        tape.records.append(_OpRecord(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        vals = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")
    return _record(
        "add", vals, (a, b),
        lambda g: (_unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        vals = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}")
    return _record(
        "sub", vals, (a, b),
        lambda g: (_unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        vals = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")

    def bwd(g):
        return (
            _unbroadcast(g * b.values, a.values.shape),
            _unbroadcast(g * a.values, b.values.shape),
        )

    return _record("mul", vals, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    vals = a.values @ b.values

    def bwd(g):
        return (g @ b.values.T, a.values.T @ g)

    return _record("matmul", vals, (a, b), bwd)


def concat_cols(parts: Sequence) -> Tensor:
    """Concatenate 2-D tensors along the feature axis."""
    ts = [as_tensor(p) for p in parts]
    rows = {t.shape[0] for t in ts}
    if any(t.values.ndim != 2 for t in ts) or len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[t.shape for t in ts]}")
    vals = np.concatenate([t.values for t in ts], axis=1)
    widths = [t.shape[1] for t in ts]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return _record("concat_cols", vals, tuple(ts), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0.0
    return _record("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def gather_rows(x, index) -> Tensor:
    """y[k] = x[index[k]] along the first axis."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-D, got {idx.shape}")
    vals = x.values[idx]
    n = x.shape[0]

    def bwd(g):
        return (_scatter_add_rows(g, idx, n),)

    return _record("gather_rows", vals, (x,), bwd)


def _scatter_add_rows(g: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Deterministic scatter-add of rows g into an [n, ...] zero array."""
    if g.ndim == 1:
        return np.bincount(idx, weights=g, minlength=n)
    out = np.empty((n, g.shape[1]), dtype=np.float64)
    for c in range(g.shape[1]):
        out[:, c] = np.bincount(idx, weights=g[:, c], minlength=n)
    return out


def _require_sorted(op: str, seg: np.ndarray) -> None:
    if seg.size and np.any(np.diff(seg) < 0):
        raise EngineError(f"{op}: segment ids must be non-decreasing")


def _segment_starts(seg: np.ndarray, n: int) -> np.ndarray:
    return np.searchsorted(seg, np.arange(n))


def _segment_sum_np(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    counts = np.bincount(seg, minlength=n)
    if values.size == 0:
        return np.zeros((n,) + values.shape[1:], dtype=np.float64)
    if values.ndim == 1:
        return np.bincount(seg, weights=values, minlength=n)
    starts = np.minimum(_segment_starts(seg, n), len(values) - 1)
    out = np.add.reduceat(values, starts, axis=0)
    out[counts == 0] = 0.0
    return out


def segment_sum(x, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of x into ``num_segments`` buckets; empty buckets give zero."""
    x = as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape != (x.shape[0],):
        raise ShapeError(f"segment_sum: ids {seg.shape} vs rows {x.shape}")
    _require_sorted("segment_sum", seg)
    vals = _segment_sum_np(x.values, seg, num_segments)

    def bwd(g):
        return (g[seg],)

    return _record("segment_sum", vals, (x,), bwd)


def segment_mean(x, segment_ids, num_segments: int) -> Tensor:
    """Mean over each segment. Every segment must be non-empty."""
    x = as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape != (x.shape[0],):
        raise ShapeError(f"segment_mean: ids {seg.shape} vs rows {x.shape}")
    _require_sorted("segment_mean", seg)
    counts = np.bincount(seg, minlength=num_segments)
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise EngineError(f"segment_mean: segment {empty} is empty")
    sums = _segment_sum_np(x.values, seg, num_segments)
    denom = counts.astype(np.float64)
    denom_col = denom if x.values.ndim == 1 else denom[:, None]
    vals = sums / denom_col

    def bwd(g):
        return ((g / denom_col)[seg],)

    return _record("segment_mean", vals, (x,), bwd)


def segment_softmax(logits, segment_ids, num_segments: int,
                    temperature: float = 1.0) -> Tensor:
    """Softmax with temperature, normalized within each contiguous segment."""
    if not temperature > 0.0:
        raise ValueError(f"segment_softmax: temperature must be > 0, got {temperature}")
    x = as_tensor(logits)
    if x.values.ndim != 1:
        raise ShapeError(f"segment_softmax: logits must be 1-D, got {x.shape}")
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape != x.values.shape:
        raise ShapeError(f"segment_softmax: ids {seg.shape} vs logits {x.shape}")
    _require_sorted("segment_softmax", seg)
    counts = np.bincount(seg, minlength=num_segments)
    if x.values.size == 0:
        alpha = np.zeros(0, dtype=np.float64)
    else:
        starts = np.minimum(_segment_starts(seg, num_segments), len(x.values) - 1)
        seg_max = np.maximum.reduceat(x.values, starts)
        seg_max[counts == 0] = 0.0
        z = np.exp((x.values - seg_max[seg]) / temperature)
        denom = _segment_sum_np(z, seg, num_segments)
        alpha = z / denom[seg]

    def bwd(g):
        inner = _segment_sum_np(alpha * g, seg, num_segments)
        return (alpha * (g - inner[seg]) / temperature,)

    return _record("segment_softmax", alpha, (x,), bwd)


def typed_matmul(x, weights: Sequence[Tensor], type_ids) -> Tensor:
    """Row-wise matmul where each row picks its weight matrix by type id."""
    x = as_tensor(x)
    ws = [as_tensor(w) for w in weights]
    tids = np.asarray(type_ids, dtype=np.intp)
    if tids.shape != (x.shape[0],):
        raise ShapeError(f"typed_matmul: type ids {tids.shape} vs rows {x.shape}")
    if any(w.shape[0] != x.shape[1] for w in ws):
        raise ShapeError(
            f"typed_matmul: weight shapes {[w.shape for w in ws]} vs input {x.shape}"
        )
    if tids.size and (tids.min() < 0 or tids.max() >= len(ws)):
        raise EngineError(f"typed_matmul: type id out of range 0..{len(ws) - 1}")
    out_dim = ws[0].shape[1]
    vals = np.zeros((x.shape[0], out_dim), dtype=np.float64)
    sels = [np.flatnonzero(tids == r) for r in range(len(ws))]
    for r, sel in enumerate(sels):
        if sel.size:
            vals[sel] = x.values[sel] @ ws[r].values

    def bwd(g):
        dx = np.zeros_like(x.values)
        dws = []
        for r, sel in enumerate(sels):
            if sel.size:
                dx[sel] = g[sel] @ ws[r].values.T
                dws.append(x.values[sel].T @ g[sel])
            else:
                dws.append(None)
        return (dx, *dws)

    return _record("typed_matmul", vals, (x, *ws), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learnable gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.values.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.values.mean(axis=1, keepdims=True)
    var = x.values.var(axis=1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv_std[:, None]
    vals = xhat * gain.values + bias.values
    d = x.shape[1]

    def bwd(g):
        gg = g * gain.values
        m1 = gg.mean(axis=1, keepdims=True)
        m2 = (gg * xhat).mean(axis=1, keepdims=True)
        dx = inv_std[:, None] * (gg - m1 - xhat * m2)
        return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _record("layer_norm", vals, (x, gain, bias), bwd)


def stack_scalars(items: Sequence) -> Tensor:
    """Stack scalar tensors (and plain floats) into a 1-D vector."""
    ts = [as_tensor(t) for t in items]
    if any(t.values.shape != () for t in ts):
        raise ShapeError("stack_scalars: every item must be a scalar")
    vals = np.array([t.values for t in ts], dtype=np.float64)

    def bwd(g):
        return tuple(np.asarray(g[k]) for k in range(len(ts)))

    return _record("stack_scalars", vals, tuple(ts), bwd)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        vals = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    orig = x.values.shape
    return _record("reshape", vals, (x,), lambda g: (g.reshape(orig),))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.values)
    return _record("abs", np.abs(x.values), (x,), lambda g: (g * sign,))


def total_sum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.values.shape
    return _record(
        "sum", np.asarray(x.values.sum()), (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    if x.values.size == 0:
        raise EngineError("mean_all: cannot average an empty tensor")
    n = x.values.size
    shape = x.values.shape
    return _record(
        "mean", np.asarray(x.values.mean()), (x,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def l1_loss(x) -> Tensor:
    """Mean absolute value of all entries."""
    return mean_all(absolute(x))


def l2_penalty(params: Sequence[Tensor]) -> Tensor:
    """Sum of squared entries across a parameter list."""
    terms = [total_sum(mul(p, p)) for p in params]
    if not terms:
        return Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc


def gradcheck(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
              n_samples: int = 20, eps: float = 1e-5, rtol: float = 1e-4,
              atol: float = 1e-8, seed: int = 0) -> tuple[bool, float, list[dict]]:
    """Compare analytic gradients against central finite differences.

    ``build_loss`` must rebuild the forward graph from the current parameter
    values each time it is called. For every parameter, up to ``n_samples``
    coordinates are probed. Returns (all_ok, worst relative error, rows).
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.Generator(np.random.PCG64(seed))
    rows: list[dict] = []
    worst = 0.0
    for p, an in zip(params, analytic):
        size = p.values.size
        if size == 0:
            continue
        coords = np.arange(size) if size <= n_samples else np.sort(
            rng.choice(size, size=n_samples, replace=False))
        flat = p.values.reshape(-1)
        a_flat = np.zeros(size) if an is None else an.reshape(-1)
        max_rel = 0.0
        ok = True
        for c in coords:
            keep = flat[c]
            flat[c] = keep + eps
            with no_grad():
                up = float(build_loss().values)
            flat[c] = keep - eps
            with no_grad():
                down = float(build_loss().values)
            flat[c] = keep
            numeric = (up - down) / (2.0 * eps)
            a = float(a_flat[c])
            err = abs(a - numeric)
            if err > rtol * max(abs(a), abs(numeric)) + atol:
                ok = False
            max_rel = max(max_rel, err / max(abs(a), abs(numeric), 1e-12))
        rows.append({"param": p.name or "param", "max_rel_err": max_rel, "ok": ok})
        worst = max(worst, max_rel)
    return all(r["ok"] for r in rows), worst, rows
