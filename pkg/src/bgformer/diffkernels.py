"""Differentiable 2-D kernels with hand-written reverse-mode gradients.

Every matrix in the model is a float64 ``numpy`` array wrapped in a
:class:`Var`.  Kernels compute the forward value eagerly and, when a
:class:`Tape` is active and any input requires a gradient, push a closure
that accumulates gradients into the inputs.  ``Tape.backward`` replays the
closures in reverse order.  There is no general autodiff machinery beyond
this: the model graph is static and shallow, so each kernel owns its own
adjoint.

Operation counting
    Inside ``with count_flops() as fc:`` every kernel adds its nominal
    floating-point operation count to ``fc``.  Conventions: a matrix
    product ``(n, k) @ (k, m)`` costs ``2nkm``; elementwise maps, additions
    and scalings cost one per entry; a row softmax costs four per entry
    (shift, exponentiate, accumulate, divide).  Counts depend only on
    shapes, so they are exact and platform independent.
"""

from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, NonFinite, ShapeMismatch

SOFTPLUS_LINEAR_ABOVE = 30.0
EXP_CLAMP = 30.0


class Var:
    """A float64 matrix with an optional gradient accumulator."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _acc(v: Var, g) -> None:
    if not v.requires_grad:
        return
    v.grad = g if v.grad is None else v.grad + g


class Tape:
    """Records backward closures while active (``with Tape() as tape``)."""

    def __init__(self):
        self._ops = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, loss: Var, seed=None) -> None:
        if loss.value.size != 1 and seed is None:
            raise ShapeMismatch("backward() needs a scalar loss or an explicit seed")
        loss.grad = np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for fn in reversed(self._ops):
            fn()
        self._ops.clear()


_TAPES: list[Tape] = []


def _out(value, inputs) -> Var:
    needs = bool(_TAPES) and any(v.requires_grad for v in inputs)
    return Var(value, requires_grad=needs)


def record(out: Var, backward) -> Var:
    """Register ``backward`` on the active tape if ``out`` needs gradients."""
    if out.requires_grad and _TAPES:
        def run():
            if out.grad is not None:
                backward(out.grad)
        _TAPES[-1]._ops.append(run)
    return out


def new_node(value, inputs, backward) -> Var:
    """Build an output Var from ``inputs`` and attach ``backward(g)``."""
    return record(_out(value, inputs), backward)


# -- operation counting -------------------------------------------------------


@dataclass
class FlopCounter:
    total: int = 0
    events: list = field(default_factory=list)

    def add(self, op: str, flops: int, out_shape) -> None:
        self.total += int(flops)
        self.events.append((op, int(flops), tuple(out_shape)))

    def by_op(self, op: str) -> int:
        return sum(f for o, f, _ in self.events if o == op)


_COUNTERS: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops():
    fc = FlopCounter()
    _COUNTERS.append(fc)
    try:
        yield fc
    finally:
        _COUNTERS.remove(fc)


def _count(op, flops, out_shape):
    for fc in _COUNTERS:
        fc.add(op, flops, out_shape)


def _check_2d(*arrs):
    for a in arrs:
        if a.ndim != 2:
            raise ShapeMismatch(f"expected a 2-D matrix, got shape {a.shape}")


# -- kernels -------------------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_2d(a.value, b.value)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.value @ b.value
    _count("matmul", 2 * a.shape[0] * a.shape[1] * b.shape[1], out.shape)

    def backward(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return new_node(out, (a, b), backward)


def matmul_t(a, b) -> Var:
    """``a @ b.T`` without materialising the transpose as a new node."""
    a, b = as_var(a), as_var(b)
    _check_2d(a.value, b.value)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"matmul_t {a.shape} @ {b.shape}.T")
    out = a.value @ b.value.T
    _count("matmul", 2 * a.shape[0] * a.shape[1] * b.shape[0], out.shape)

    def backward(g):
        _acc(a, g @ b.value)
        _acc(b, g.T @ a.value)

    return new_node(out, (a, b), backward)


def affine(x, w, bias) -> Var:
    """Row-wise affine map ``x @ w + bias`` with ``bias`` of shape (1, b)."""
    x, w, bias = as_var(x), as_var(w), as_var(bias)
    _check_2d(x.value, w.value, bias.value)
    if x.shape[1] != w.shape[0] or bias.shape != (1, w.shape[1]):
        raise ShapeMismatch(f"affine {x.shape} @ {w.shape} + {bias.shape}")
    out = x.value @ w.value + bias.value
    n, a = x.shape
    b = w.shape[1]
    _count("affine", 2 * n * a * b + n * b, out.shape)

    def backward(g):
        _acc(x, g @ w.value.T)
        _acc(w, x.value.T @ g)
        _acc(bias, g.sum(axis=0, keepdims=True))

    return new_node(out, (x, w, bias), backward)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add {a.shape} + {b.shape}")
    out = a.value + b.value
    _count("add", out.size, out.shape)

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return new_node(out, (a, b), backward)


def scale(a, c: float) -> Var:
    a = as_var(a)
    out = a.value * c
    _count("scale", out.size, out.shape)
    return new_node(out, (a,), lambda g: _acc(a, g * c))


def scale_rows(a, s) -> Var:
    """Multiply row ``i`` of ``a`` by the constant ``s[i]``."""
    a = as_var(a)
    s = np.asarray(s, dtype=np.float64).reshape(-1, 1)
    if s.shape[0] != a.shape[0]:
        raise ShapeMismatch(f"scale_rows: {s.shape[0]} factors for {a.shape[0]} rows")
    out = a.value * s
    _count("scale", out.size, out.shape)
    return new_node(out, (a,), lambda g: _acc(a, g * s))


def concat_cols(parts) -> Var:
    parts = [as_var(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeMismatch(f"concat_cols row counts differ: {sorted(rows)}")
    out = np.concatenate([p.value for p in parts], axis=1)
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            _acc(p, g[:, lo:hi])

    return new_node(out, parts, backward)


def gather_rows(u, idx) -> Var:
    """``u[idx]``; gradients scatter-add back into the selected rows."""
    u = as_var(u)
    idx = np.asarray(idx, dtype=np.int64)
    out = u.value[idx]

    def backward(g):
        if u.requires_grad:
            gu = np.zeros_like(u.value)
            np.add.at(gu, idx, g)
            _acc(u, gu)

    return new_node(out, (u,), backward)


def straight_through(h, selected, h_ref=None) -> Var:
    """Forward value of ``selected``; gradient copied to both inputs.

    With ``h_ref`` given the value is ``selected + (h - h_ref)``, which is
    numerically ``selected`` at ``h == h_ref`` but has a true derivative
    equal to the routed gradient.  Finite-difference checks use this form.
    """
    h, selected = as_var(h), as_var(selected)
    if h.shape != selected.shape:
        raise ShapeMismatch(f"straight_through {h.shape} vs {selected.shape}")
    out = selected.value.copy() if h_ref is None else selected.value + (h.value - h_ref)

    def backward(g):
        _acc(h, g)
        _acc(selected, g)

    return new_node(out, (h, selected), backward)


def row_softmax(s) -> Var:
    s = as_var(s)
    _check_2d(s.value)
    z = s.value - s.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    _count("row_softmax", 4 * y.size, y.shape)

    def backward(g):
        _acc(s, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return new_node(y, (s,), backward)


def sigmoid(x) -> Var:
    x = as_var(x)
    v = x.value
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)
    _count("sigmoid", y.size, y.shape)
    return new_node(y, (x,), lambda g: _acc(x, g * y * (1.0 - y)))


def softplus(x) -> Var:
    x = as_var(x)
    v = x.value
    big = v > SOFTPLUS_LINEAR_ABOVE
    y = np.where(big, v, np.log1p(np.exp(np.minimum(v, SOFTPLUS_LINEAR_ABOVE))))
    _count("softplus", y.size, y.shape)

    def backward(g):
        # d softplus / dx = sigmoid(x)
        _acc(x, g * sigmoid(Var(v)).value)

    return new_node(y, (x,), backward)


def exp(x, clamp: float | None = None) -> Var:
    """Elementwise exponential; with ``clamp`` the argument is capped first."""
    x = as_var(x)
    v = x.value if clamp is None else np.minimum(x.value, clamp)
    y = np.exp(v)
    _count("exp", y.size, y.shape)

    def backward(g):
        gx = g * y
        if clamp is not None:
            gx = np.where(x.value > clamp, 0.0, gx)
        _acc(x, gx)

    return new_node(y, (x,), backward)


def log1p(x) -> Var:
    x = as_var(x)
    y = np.log1p(x.value)
    _count("log1p", y.size, y.shape)
    return new_node(y, (x,), lambda g: _acc(x, g / (1.0 + x.value)))


_ELEMENTWISE = {"sigmoid": sigmoid, "softplus": softplus, "exp": exp, "log1p": log1p}


def elementwise(kind: str, x) -> Var:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(x)


def total(x) -> Var:
    """Sum of all entries as a 1x1 matrix."""
    x = as_var(x)
    out = np.array([[x.value.sum()]])
    _count("sum", x.value.size, out.shape)
    return new_node(out, (x,), lambda g: _acc(x, np.full_like(x.value, g.item())))


def sq_frobenius(x) -> Var:
    x = as_var(x)
    out = np.array([[np.sum(x.value * x.value)]])
    _count("sq_norm", 2 * x.value.size, out.shape)
    return new_node(out, (x,), lambda g: _acc(x, 2.0 * g.item() * x.value))


def row_norms(x) -> np.ndarray:
    """Euclidean norm of every row (not differentiable; used for guards)."""
    return np.sqrt(np.einsum("ij,ij->i", as_var(x).value, as_var(x).value))


def weighted_sum(terms) -> Var:
    """``sum(w * t)`` for (weight, 1x1 Var) pairs."""
    terms = [(float(w), as_var(t)) for w, t in terms]
    out = np.array([[sum(w * t.value.item() for w, t in terms)]])

    def backward(g):
        for w, t in terms:
            _acc(t, g * w)

    return new_node(out, [t for _, t in terms], backward)


# -- parameters ----------------------------------------------------------------


class ParamStore:
    """Named trainable matrices with paired gradient buffers."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Var] = {}

    def add(self, name: str, rows: int, cols: int, init: str = "uniform") -> Var:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        if init == "uniform":
            bound = math.sqrt(6.0 / (rows + cols))
            value = self.rng.uniform(-bound, bound, size=(rows, cols))
        elif init == "zeros":
            value = np.zeros((rows, cols))
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Var(value, requires_grad=True)
        p.grad = np.zeros_like(p.value)
        self._params[name] = p
        return p

    def set(self, name: str, value) -> Var:
        p = Var(np.array(value, dtype=np.float64), requires_grad=True)
        p.grad = np.zeros_like(p.value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Var:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.value)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._params.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self._params[k].value = v.copy()


def save_checkpoint(path, values: dict[str, np.ndarray]) -> None:
    """Write ``values`` as a BGF1 container (little-endian, row-major)."""
    with open(path, "wb") as fh:
        fh.write(b"BGF1")
        fh.write(struct.pack("<I", len(values)))
        for name, arr in values.items():
            arr = np.asarray(arr, dtype="<f8")
            if arr.ndim != 2:
                raise ShapeMismatch(f"checkpoint entry {name!r} is not 2-D")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<QQ", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != b"BGF1":
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        (count,) = struct.unpack_from("<I", data, 4)
        off = 8
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            rows, cols = struct.unpack_from("<QQ", data, off)
            off += 16
            nbytes = 8 * rows * cols
            if off + nbytes > len(data):
                raise FormatError(f"{path}: truncated entry {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
            off += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return out


# -- gradient checking -----------------------------------------------------------


def grad_check(f, params: ParamStore, h: float = 1e-6, names=None) -> float:
    """Compare reverse-mode gradients of scalar ``f(params)`` with central differences.

    ``f`` must build its value from the Vars in ``params`` using the kernels
    in this module.  Returns the maximum over all checked entries of
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step size {h} outside [1e-7, 1e-4]")
    names = params.names() if names is None else list(names)
    params.zero_grad()
    with Tape() as tape:
        loss = as_var(f(params))
        base = loss.value.item()
        if not math.isfinite(base):
            raise NonFinite("objective is not finite at the base point")
        tape.backward(loss)
    analytic = {k: params[k].grad.copy() for k in names}

    worst = 0.0
    for k in names:
        p = params[k]
        flat = p.value.reshape(-1)
        ga = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = as_var(f(params)).value.item()
            flat[i] = orig - h
            fm = as_var(f(params)).value.item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFinite(f"objective not finite while probing {k}[{i}]")
            gfd = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - gfd) / max(1.0, abs(ga[i]), abs(gfd))
            worst = max(worst, err)
    params.zero_grad()
    return worst
