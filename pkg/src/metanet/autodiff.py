"""Dense reverse-mode automatic differentiation on a recording tape.

Tensors wrap float64 numpy arrays (or ``working_dtype`` when set). A tensor created by ``Tape.leaf`` (or
produced by an op with at least one taped input) carries a node id on that
tape; everything else is a constant. Ops on constants only compute values.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


_DTYPE = np.float64


@contextlib.contextmanager
def working_dtype(dtype):
    """Evaluate ops in ``dtype`` (e.g. np.longdouble for a high-resolution oracle)."""
    global _DTYPE
    old, _DTYPE = _DTYPE, dtype
    try:
        yield
    finally:
        _DTYPE = old


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_constant(self) -> bool:
        return self.tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered list of recorded ops. Single-threaded."""

    def __init__(self):
        self.records: list[Record] = []
        self._ids = itertools.count()
        self.leaves: dict[int, Tensor] = {}

    def leaf(self, value) -> Tensor:
        t = Tensor(np.array(value, dtype=_DTYPE), self, next(self._ids))
        self.leaves[t.node] = t
        return t

    def _record(self, kind, tensors, out, vjp) -> Tensor:
        node = next(self._ids)
        inputs = tuple(t.node if t.tape is self else None for t in tensors)
        self.records.append(Record(kind, inputs, node, vjp))
        return Tensor(out, self, node)

    def __len__(self) -> int:
        return len(self.records)


_OPS: dict[str, Callable] = {}


def _register(kind):
    def deco(fn):
        _OPS[kind] = fn
        return fn
    return deco


def op_kinds() -> list[str]:
    return sorted(_OPS)


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Run op ``kind`` on ``inputs`` and record it on the inputs' tape."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError(f"{kind}: inputs recorded on different tapes")
            tape = t.tape
    with np.errstate(over="ignore", invalid="ignore"):
        out, vjp = fn(*(t.data for t in tensors), **attrs)
    out = np.asarray(out, dtype=_DTYPE)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{kind}: non-finite output")
    if tape is None:
        return Tensor(out)
    return tape._record(kind, tensors, out, vjp)


def _mismatch(kind, *shapes):
    return ShapeError(f"{kind}: incompatible shapes " + " and ".join(str(s) for s in shapes))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _mismatch(kind, a.shape, b.shape) from None


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- elementwise

@_register("add")
def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@_register("sub")
def _sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@_register("mul")
def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@_register("relu")
def _relu(x):
    mask = x > 0
    return np.where(mask, x, 0.0), lambda g: (g * mask,)


# ---------------------------------------------------------------- linear maps

@_register("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _mismatch("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise _mismatch("matmul", a.shape, b.shape) from None
    out = a @ b

    def vjp(g):
        return _unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape)
    return out, vjp


def _im2col(x):
    # (B, C, H, W) -> (B, Ho*Wo, 9C + 1); trailing column of ones feeds the bias
    B, C, H, W = x.shape
    win = sliding_window_view(x, (3, 3), axis=(2, 3))  # B, C, Ho, Wo, 3, 3
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, 9 * C)
    return np.concatenate([cols, np.ones((B, Ho * Wo, 1))], axis=2), Ho, Wo


@_register("conv3x3")
def _conv3x3(x, w):
    """Valid 3x3 convolution, stride 1.

    ``w`` is a filter matrix (F, 9C+1) with the bias in the last column, or
    a per-example stack (B, F, 9C+1).
    """
    if x.ndim != 4 or x.shape[2] < 3 or x.shape[3] < 3:
        raise _mismatch("conv3x3", x.shape, w.shape)
    B, C = x.shape[:2]
    if w.shape[-1] != 9 * C + 1 or w.ndim not in (2, 3) or (w.ndim == 3 and w.shape[0] != B):
        raise _mismatch("conv3x3", x.shape, w.shape)
    cols, Ho, Wo = _im2col(x)
    F = w.shape[-2]
    out = cols @ _swap(w)  # B, HoWo, F
    out = out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B, Ho * Wo, F)
        gw = _swap(gm) @ cols
        if w.ndim == 2:
            gw = gw.sum(axis=0)
        gc = (gm @ w)[:, :, :-1].reshape(B, Ho, Wo, C, 3, 3)
        gx = np.zeros_like(x)
        for di in range(3):
            for dj in range(3):
                gx[:, :, di:di + Ho, dj:dj + Wo] += gc[..., di, dj].transpose(0, 3, 1, 2)
        return gx, gw
    return out, vjp


@_register("maxpool2x2")
def _maxpool2x2(x):
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise _mismatch("maxpool2x2", x.shape)
    B, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    win = x[:, :, :2 * H2, :2 * W2].reshape(B, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H2, W2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((B, C, H2, W2, 4))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * H2, 2 * W2)
        gx = np.zeros_like(x)
        gx[:, :, :2 * H2, :2 * W2] = gw
        return (gx,)
    return out, vjp


# ---------------------------------------------------------------- structural

@_register("reshape")
def _reshape(x, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise _mismatch("reshape", x.shape, tuple(shape)) from None
    return out, lambda g: (g.reshape(x.shape),)


@_register("transpose")
def _transpose(x, axes=None):
    if axes is None:
        if x.ndim < 2:
            raise _mismatch("transpose", x.shape)
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    inv = np.argsort(axes)
    return x.transpose(axes), lambda g: (g.transpose(inv),)


@_register("index")
def _index(x, key):
    if not isinstance(key, tuple):
        key = (key,)
    if any(not isinstance(k, (slice, int, type(Ellipsis))) for k in key):
        raise TypeError("index: only basic slicing is supported")
    try:
        out = x[key]
    except IndexError:
        raise _mismatch("index", x.shape, key) from None

    def vjp(g):
        gx = np.zeros_like(x)
        gx[key] = g
        return (gx,)
    return out, vjp


@_register("concat")
def _concat(*xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise _mismatch("concat", *(x.shape for x in xs)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


@_register("stack")
def _stack(*xs, axis=0):
    try:
        out = np.stack(xs, axis=axis)
    except ValueError:
        raise _mismatch("stack", *(x.shape for x in xs)) from None
    return out, lambda g: tuple(np.moveaxis(g, axis, 0))


# ---------------------------------------------------------------- reductions

@_register("sum")
def _sum(x, axis=None, keepdims=False):
    out = x.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return out, vjp


@_register("mean")
def _mean(x, axis=None, keepdims=False):
    out, vjp_sum = _sum(x, axis, keepdims)
    n = x.size / max(out.size, 1)
    return out / n, lambda g: (vjp_sum(g / n)[0],)


# ---------------------------------------------------------------- nn

@_register("softmax")
def _softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)
    return y, lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


@_register("cross_entropy")
def _cross_entropy(logits, labels):
    """Per-row softmax cross-entropy; 1-D logits give a scalar."""
    labels = np.asarray(labels, dtype=np.int64)
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    lab = labels.reshape(-1)
    if lg.ndim != 2 or lab.shape[0] != lg.shape[0]:
        raise _mismatch("cross_entropy", logits.shape, labels.shape)
    if lab.size and (lab.min() < 0 or lab.max() >= lg.shape[1]):
        raise ValueError(f"cross_entropy: label out of range for {lg.shape[1]} classes")
    shifted = lg - lg.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(lg.shape[0])
    out = -logp[rows, lab]

    def vjp(g):
        d = np.exp(logp)
        d[rows, lab] -= 1.0
        d *= np.reshape(g, (-1, 1))
        return (d[0] if single else d,)
    return (out[0] if single else out), vjp


@_register("cosine_similarity")
def _cosine(a, b):
    _broadcast_shape("cosine_similarity", a, b)
    na = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=-1, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericError("cosine_similarity: zero-norm vector")
    dot = (a * b).sum(axis=-1, keepdims=True)
    out = dot / (na * nb)

    def vjp(g):
        g = g[..., None]
        ga = g * (b / (na * nb) - out * a / (na * na))
        gb = g * (a / (na * nb) - out * b / (nb * nb))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return out[..., 0], vjp


@_register("l2_distance")
def _l2_distance(a, b):
    _broadcast_shape("l2_distance", a, b)
    diff = a - b
    d = np.sqrt((diff * diff).sum(axis=-1, keepdims=True))

    def vjp(g):
        unit = np.divide(diff, d, out=np.zeros_like(diff), where=d > 0)
        gd = g[..., None] * unit
        return _unbroadcast(gd, a.shape), _unbroadcast(-gd, b.shape)
    return d[..., 0], vjp


@_register("lstm_cell")
def _lstm_cell(x, state, w, b):
    """One LSTM step. ``state`` packs (h, c) as (P, 2H); returns the new pack.

    Gate order in ``w`` (I+H, 4H) and ``b`` (4H): input, forget, cell, output.
    """
    if x.ndim != 2 or state.ndim != 2 or state.shape[1] % 2:
        raise _mismatch("lstm_cell", x.shape, state.shape)
    H = state.shape[1] // 2
    if w.shape != (x.shape[1] + H, 4 * H) or b.shape != (4 * H,) or state.shape[0] != x.shape[0]:
        raise _mismatch("lstm_cell", x.shape, state.shape, w.shape, b.shape)
    h, c = state[:, :H], state[:, H:]
    xh = np.concatenate([x, h], axis=1)
    z = xh @ w + b
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    u = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c2 = f * c + i * u
    tc = np.tanh(c2)
    h2 = o * tc

    def vjp(g):
        gh, gc = g[:, :H], g[:, H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * u * i * (1.0 - i),
            dc * c * f * (1.0 - f),
            dc * i * (1.0 - u * u),
            gh * tc * o * (1.0 - o),
        ], axis=1)
        dxh = dz @ w.T
        gstate = np.concatenate([dxh[:, x.shape[1]:], dc * f], axis=1)
        return dxh[:, :x.shape[1]], gstate, xh.T @ dz, dz.sum(axis=0)
    return np.concatenate([h2, c2], axis=1), vjp


# ---------------------------------------------------------------- public op API

def add(a, b): return forward_op("add", a, b)
def sub(a, b): return forward_op("sub", a, b)
def mul(a, b): return forward_op("mul", a, b)
def relu(x): return forward_op("relu", x)
def matmul(a, b): return forward_op("matmul", a, b)
def conv3x3(x, w): return forward_op("conv3x3", x, w)
def maxpool2x2(x): return forward_op("maxpool2x2", x)
def reshape(x, shape): return forward_op("reshape", x, shape=tuple(shape))
def transpose(x, axes=None): return forward_op("transpose", x, axes=axes)
def index(x, key): return forward_op("index", x, key=key)
def concat(xs, axis=0): return forward_op("concat", *xs, axis=axis)
def stack(xs, axis=0): return forward_op("stack", *xs, axis=axis)
def sum(x, axis=None, keepdims=False): return forward_op("sum", x, axis=axis, keepdims=keepdims)  # noqa: A001
def mean(x, axis=None, keepdims=False): return forward_op("mean", x, axis=axis, keepdims=keepdims)
def softmax(x): return forward_op("softmax", x)
def cross_entropy(logits, labels): return forward_op("cross_entropy", logits, labels=labels)
def cosine_similarity(a, b): return forward_op("cosine_similarity", a, b)
def l2_distance(a, b): return forward_op("l2_distance", a, b)
def lstm_cell(x, state, w, b): return forward_op("lstm_cell", x, state, w, b)


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse pass from scalar ``loss``. Returns {node id: gradient} for ``wrt``
    (all leaves when omitted); leaves the loss does not depend on get zeros."""
    if loss.tape is not tape or loss.node is None:
        raise TapeError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        for node, gi in zip(rec.inputs, rec.vjp(g)):
            if node is None or gi is None:
                continue
            if node in grads:
                grads[node] = grads[node] + gi
            else:
                grads[node] = gi
    targets = list(tape.leaves.values()) if wrt is None else list(wrt)
    out = {}
    for t in targets:
        if t.tape is not tape or t.node not in tape.leaves:
            raise TapeError("gradient requested for a tensor that is not a leaf of this tape")
        out[t.node] = grads.get(t.node, np.zeros_like(t.data))
    return out


def grad(f: Callable, params):
    """Value and gradient of scalar ``f`` at ``params`` (array or dict of arrays)."""
    tape = Tape()
    if isinstance(params, dict):
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        loss = f(leaves)
        g = backward(tape, loss, list(leaves.values()))
        return loss.item(), {k: g[t.node] for k, t in leaves.items()}
    leaf = tape.leaf(params)
    loss = f(leaf)
    return loss.item(), backward(tape, loss, [leaf])[leaf.node]


def finite_diff_check(f: Callable, at, h: float = 1e-5, coords: int | None = None,
                      rng: np.random.Generator | None = None, oracle_dtype=np.float64) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``at`` is an array or a dict of arrays; ``f`` receives the same structure
    of tensors. ``coords`` limits the check to a random subset of coordinates.
    ``oracle_dtype=np.longdouble`` evaluates the differences in extended
    precision, which resolves gradients far below double-precision round-off.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    is_dict = isinstance(at, dict)
    base = {k: np.array(v, dtype=np.float64) for k, v in (at.items() if is_dict else [(None, at)])}

    def evaluate(values):
        with working_dtype(oracle_dtype):
            arg = {k: Tensor(v) for k, v in values.items()} if is_dict else Tensor(values[None])
            return as_tensor(f(arg)).data.reshape(-1)[0]

    f0 = evaluate(base)
    if evaluate(base) != f0:
        raise ValueError("finite_diff_check: f is not deterministic")
    _, g = grad(f, base if is_dict else base[None])
    analytic = g if is_dict else {None: g}

    flat = [(k, i) for k, v in base.items() for i in range(v.size)]
    if coords is not None and coords < len(flat):
        rng = rng or np.random.default_rng(0)
        flat = [flat[j] for j in np.sort(rng.choice(len(flat), coords, replace=False))]
    worst = 0.0
    for k, i in flat:
        v = base[k].reshape(-1)
        old = v[i]
        v[i] = old + h
        fp = evaluate(base)
        v[i] = old - h
        fm = evaluate(base)
        v[i] = old
        num = float((fp - fm) / (2 * np.asarray(h, dtype=oracle_dtype)))
        ana = float(analytic[k].reshape(-1)[i])
        err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- gradient preprocessing

@dataclass(frozen=True)
class GradPreprocConfig:
    p: float = 7.0

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError("p must be positive")


def preprocess_gradient(g, cfg: GradPreprocConfig = GradPreprocConfig()) -> np.ndarray:
    """Coordinate-wise log/sign encoding of a gradient; output gains a trailing axis of 2.

    |g| >= e^-p maps to (log|g| / p, sign g), smaller values to (-1, e^p g).
    """
    g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError("preprocess_gradient: non-finite gradient")
    p = cfg.p
    a = np.abs(g)
    big = a >= math.exp(-p)
    first = np.where(big, np.log(np.where(big, a, 1.0)) / p, -1.0)
    second = np.where(big, np.sign(g), math.exp(p) * g)
    return np.stack([first, second], axis=-1)
