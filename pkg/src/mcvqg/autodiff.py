"""Dense float64 tensors with a reverse-mode tape.

Shape discipline is strict: binary elementwise ops demand identical shapes
and the only implicit broadcast is scalar * tensor (`scale`). Batched
variants (`affine` with a row bias, `row_softmax`, `tile_rows`, ...) are
separate named operations so that shape bugs surface as errors instead of
silent broadcasting. Values are checked finite on construction, which makes
NaN/Inf an error at the op that produced it.

A `Tape` records one forward pass while active (`with Tape() as t:`) and is
consumed by a single `backward` call; the next forward pass gets a fresh
tape. Gradients accumulate on every requires_grad tensor touched by the
sweep — leaves and intermediates alike — which is what lets the two-pass
refinement scheme read d(loss)/d(mixed encoding) off an interior node.
"""

import threading
from contextlib import contextmanager

import numpy as np

from .rng import RngStream

DROPOUT_KINDS = ("bernoulli", "gaussian")


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    """An operation produced inf/nan — the computation has left the domain
    the gradients are valid on."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Data is immutable by convention once constructed (the optimizer and the
    finite-difference driver mutate parameter `.data` in place *between*
    forward passes, never during one).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_LOCAL = threading.local()


def _stack():
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of one forward pass, confined to one thread.

    Reset rule: `backward` may run once per tape; afterwards the tape is
    closed and both recording and a second backward raise. Build a new tape
    per forward pass (the two-pass refinement builds two tapes per step).
    """

    def __init__(self):
        self._nodes = []
        self._closed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out, backward_fn):
        if self._closed:
            raise RuntimeError("tape already consumed by backward()")
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Tensor):
        """Seed d(loss)=1 and sweep the tape once in reverse topological
        order, accumulating gradients onto every requires_grad tensor."""
        if self._closed:
            raise RuntimeError("tape already consumed by backward()")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not loss.requires_grad:
            raise RuntimeError("backward on a detached graph: loss does not require grad")
        self._closed = True
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._nodes):
            g = out.grad
            if g is not None:
                backward_fn(g)


@contextmanager
def no_grad():
    """Suspend recording (generation / finite-difference evaluations)."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(out_data, inputs, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, backward_fn)
    return out


def _check_same_shape(name, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{name}: shapes differ: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# core ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for the (m,k)x(k,n), (k,)x(k,n) and (m,k)x(k,) cases."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or (ad.ndim == 1 and bd.ndim == 1):
        raise ShapeError(f"matmul: unsupported ranks: {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: inner extents disagree: {ad.shape} x {bd.shape}")
    out = ad @ bd

    def backward_fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        elif ad.ndim == 1:            # (k,) @ (k,n) -> (n,)
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))
        else:                         # (m,k) @ (k,) -> (m,)
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)

    return _make(out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def backward_fn(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def backward_fn(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def backward_fn(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    """The one scalar broadcast: c * tensor."""
    c = float(c)

    def backward_fn(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def backward_fn(g):
        _accum(a, g * (1.0 - t * t))

    return _make(t, (a,), backward_fn)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def backward_fn(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def backward_fn(g):
        _accum(a, g * e)

    return _make(e, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")

    def backward_fn(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward_fn)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; strictly positive output."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)

    def backward_fn(g):
        _accum(a, g * s)

    return _make(out, (a,), backward_fn)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; derivative blows up at exactly 0, so keep
    differentiable inputs strictly positive (softplus upstream does)."""
    if np.any(a.data < 0):
        raise ValueError("sqrt: input must be nonnegative")
    r = np.sqrt(a.data)

    def backward_fn(g):
        _accum(a, g * 0.5 / r)

    return _make(r, (a,), backward_fn)


# ---------------------------------------------------------------------------
# batched / structural ops

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias added to every row (explicit, not broadcast)."""
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2 or bd.ndim != 1 or wd.shape[1] != bd.shape[0]:
        raise ShapeError(f"affine: bad weight/bias shapes {wd.shape} / {bd.shape}")
    if xd.ndim not in (1, 2) or xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"affine: input {xd.shape} does not match weight {wd.shape}")
    out = xd @ wd + bd

    def backward_fn(g):
        _accum(x, g @ wd.T)
        if xd.ndim == 2:
            _accum(w, xd.T @ g)
            _accum(b, g.sum(axis=0))
        else:
            _accum(w, np.outer(xd, g))
            _accum(b, g)

    return _make(out, (x, w, b), backward_fn)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of a (B, n) matrix."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"add_rowvec: {x.data.shape} + {v.data.shape}")

    def backward_fn(g):
        _accum(x, g)
        _accum(v, g.sum(axis=0))

    return _make(x.data + v.data, (x, v), backward_fn)


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols: empty input")
    if any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols: all parts must be 2-D")
    rows = parts[0].data.shape[0]
    if any(p.data.shape[0] != rows for p in parts):
        raise ShapeError(f"concat_cols: row counts differ: {[p.data.shape for p in parts]}")
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward_fn(g):
        off = 0
        for p, wdt in zip(parts, widths):
            _accum(p, g[:, off:off + wdt])
            off += wdt

    return _make(out, tuple(parts), backward_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] of {x.data.shape}")

    def backward_fn(g):
        buf = np.zeros_like(x.data)
        buf[:, start:stop] = g
        _accum(x, buf)

    return _make(x.data[:, start:stop].copy(), (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward_fn(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward_fn)


def tile_rows(x: Tensor, reps: int) -> Tensor:
    """Stack `reps` copies of a (B, n) matrix into (reps*B, n)."""
    if x.data.ndim != 2:
        raise ShapeError(f"tile_rows: need 2-D input, got {x.data.shape}")
    rows, cols = x.data.shape

    def backward_fn(g):
        _accum(x, g.reshape(reps, rows, cols).sum(axis=0))

    return _make(np.tile(x.data, (reps, 1)), (x,), backward_fn)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a (V, n) table by integer id — embedding lookup."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"gather_rows: table {table.data.shape}, ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"gather_rows: id out of range for table of {table.data.shape[0]} rows")

    def backward_fn(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make(table.data[ids], (table,), backward_fn)


def gather_cols(x: Tensor, ids) -> Tensor:
    """Per-row column pick: out[b] = x[b, ids[b]]."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.data.ndim != 2 or ids.shape != (x.data.shape[0],):
        raise ShapeError(f"gather_cols: x {x.data.shape}, ids {ids.shape}")
    rows = np.arange(x.data.shape[0])

    def backward_fn(g):
        buf = np.zeros_like(x.data)
        buf[rows, ids] = g
        _accum(x, buf)

    return _make(x.data[rows, ids], (x,), backward_fn)


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner product of two (B, n) matrices -> (B,)."""
    _check_same_shape("dot_rows", a, b)
    if a.data.ndim != 2:
        raise ShapeError(f"dot_rows: need 2-D inputs, got {a.data.shape}")

    def backward_fn(g):
        _accum(a, g[:, None] * b.data)
        _accum(b, g[:, None] * a.data)

    return _make((a.data * b.data).sum(axis=1), (a, b), backward_fn)


def colscale(x: Tensor, s: Tensor) -> Tensor:
    """Scale row b of a (B, n) matrix by scalar s[b]."""
    if x.data.ndim != 2 or s.data.shape != (x.data.shape[0],):
        raise ShapeError(f"colscale: x {x.data.shape}, s {s.data.shape}")

    def backward_fn(g):
        _accum(x, g * s.data[:, None])
        _accum(s, (g * x.data).sum(axis=1))

    return _make(x.data * s.data[:, None], (x, s), backward_fn)


def row_softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_softmax: need 2-D input, got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        _accum(x, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _make(p, (x,), backward_fn)


def row_logsumexp(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a (B, n) matrix -> (B,)."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_logsumexp: need 2-D input, got {x.data.shape}")
    m = x.data.max(axis=1)
    e = np.exp(x.data - m[:, None])
    s = e.sum(axis=1)
    p = e / s[:, None]

    def backward_fn(g):
        _accum(x, g[:, None] * p)

    return _make(m + np.log(s), (x,), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over a 1-D vector (max-subtracted)."""
    if x.data.ndim != 1:
        raise ShapeError(f"softmax: need 1-D input, got {x.data.shape}")
    if x.data.size == 0:
        raise ShapeError("softmax: empty input")
    z = x.data - x.data.max()
    e = np.exp(z)
    p = e / e.sum()

    def backward_fn(g):
        _accum(x, p * (g - float((g * p).sum())))

    return _make(p, (x,), backward_fn)


def logsumexp(x: Tensor) -> Tensor:
    if x.data.ndim != 1:
        raise ShapeError(f"logsumexp: need 1-D input, got {x.data.shape}")
    if x.data.size == 0:
        raise ShapeError("logsumexp: empty input")
    m = x.data.max()
    e = np.exp(x.data - m)
    s = e.sum()
    p = e / s

    def backward_fn(g):
        _accum(x, float(g) * p)

    return _make(np.asarray(m + np.log(s)), (x,), backward_fn)


def softmax_logsumexp(x: Tensor):
    """(softmax(x), logsumexp(x)) for a 1-D vector; probs sum to 1."""
    return softmax(x), logsumexp(x)


def log_mean_exp_rows(x: Tensor) -> Tensor:
    """Column-wise log((1/T) sum_t exp(x[t, :])) for a (T, B) matrix -> (B,).

    Computed as m + log(s/T) so that T identical rows give back the row
    bitwise (s/T == 1.0 exactly, log(1.0) == 0.0) — the zero-variance
    degeneracy of the MC-averaged likelihood is then exact.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"log_mean_exp_rows: need 2-D input, got {x.data.shape}")
    reps = x.data.shape[0]
    m = x.data.max(axis=0)
    e = np.exp(x.data - m[None, :])
    s = e.sum(axis=0)
    w = e / s[None, :]

    def backward_fn(g):
        _accum(x, w * g[None, :])

    return _make(m + np.log(s / reps), (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(x, np.full_like(x.data, float(g)))

    return _make(np.asarray(x.data.sum()), (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward_fn(g):
        _accum(x, np.full_like(x.data, float(g) / n))

    return _make(np.asarray(x.data.mean()), (x,), backward_fn)


def reverse_grad(x: Tensor, gamma: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -gamma."""
    gamma = float(gamma)
    if gamma < 0:
        raise ValueError(f"reverse_grad: gamma must be nonnegative, got {gamma}")

    def backward_fn(g):
        _accum(x, -gamma * g)

    return _make(x.data.copy(), (x,), backward_fn)


# ---------------------------------------------------------------------------
# dropout

def dropout_mask(shape, p: float, kind: str, rng: RngStream):
    """Multiplicative dropout mask: inverted Bernoulli (values 0 or 1/(1-p))
    or mean-one Gaussian with variance p/(1-p)."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if kind == "bernoulli":
        keep = 1.0 - p
        return (rng.uniform(shape) < keep).astype(np.float64) / keep
    if kind == "gaussian":
        return 1.0 + np.sqrt(p / (1.0 - p)) * rng.normal(shape)
    raise ValueError(f"unknown dropout kind: {kind!r}")


def dropout(x: Tensor, p: float, kind: str, source) -> Tensor:
    """Multiplicative dropout. `source` is an RngStream (fresh mask) or a
    precomputed mask array (tied masks); p=0 returns the input unchanged."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    if isinstance(source, RngStream):
        mask = dropout_mask(x.data.shape, p, kind, source)
    else:
        mask = np.asarray(source, dtype=np.float64)
        if mask.shape != x.data.shape:
            raise ShapeError(f"dropout: mask {mask.shape} does not match input {x.data.shape}")

    def backward_fn(g):
        _accum(x, g * mask)

    return _make(x.data * mask, (x,), backward_fn)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, params, h: float = 1e-5, abs_floor: float = 1e-8,
               rel_floor: float = 1e-3) -> float:
    """Compare tape gradients of scalar `f()` against central differences.

    `f` must be deterministic across calls (freeze any stochasticity via
    counter-based streams before checking). Returns the worst relative error
    |fd - ad| / max(|fd|, |ad|, floor) over every coordinate of every
    parameter, with floor = max(abs_floor, rel_floor * max|grad|) guarding
    the denominator so near-zero-gradient coordinates measure against the
    gradient's overall scale instead of dividing FD noise by ~0.
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    fd = [np.zeros_like(p.data) for p in params]
    with no_grad():
        for p, buf in zip(params, fd):
            flat = p.data.reshape(-1)
            out = buf.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = f().item()
                flat[i] = orig - h
                f_minus = f().item()
                flat[i] = orig
                out[i] = (f_plus - f_minus) / (2.0 * h)

    gmax = 0.0
    for a, b in zip(analytic, fd):
        if a.size:
            gmax = max(gmax, float(np.abs(a).max()), float(np.abs(b).max()))
    floor = max(abs_floor, rel_floor * gmax)

    worst = 0.0
    for a, b in zip(analytic, fd):
        if not a.size:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float((np.abs(a - b) / denom).max()))
    return worst
