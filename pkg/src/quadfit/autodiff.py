"""Reverse-mode automatic differentiation on a dynamic tape.

Nodes hold numpy arrays (scalars are 0-d), so one node can represent a whole
vertex buffer or pixel window; the tape is rebuilt for every energy
evaluation because the rasterizer's active pixel set moves with the
parameters.  Nodes are appended in evaluation order, which is already a
topological order, so the backward pass is a single reverse sweep that
touches each node once.

The functions in this module (``sin``, ``exp``, ``matmul``, ...) dispatch on
their arguments: plain numpy in, plain numpy out; ``Var`` in, a new tape node
out.  Model, camera, and loss code is written once against this interface and
runs on both paths.

Every primitive checks its forward value and raises ``PoisonedValueError``
naming the operation if a NaN or Inf appears, so a poisoned energy is caught
at the first bad node rather than at the optimizer.
"""

from __future__ import annotations

import builtins
import dataclasses
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import PoisonedValueError

# Parameter blocks differentiated by record_and_backward, in fixed order.
BLOCKS = ("pose", "shape", "log_scale", "translation", "focal")

# Smoothing used inside l2norm so the gradient stays bounded at zero residual.
NORM_EPS = 1e-12


class Tape:
    """Recording of one forward pass; append-only list of nodes."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Var] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: str = "leaf") -> "Var":
        return Var(self, np.asarray(value, dtype=np.float64), (), name)


class Var:
    """One tape node: a float64 array value plus vjp edges to its parents."""

    __slots__ = ("tape", "value", "name", "parents", "grad")

    # Make numpy defer mixed ndarray-Var arithmetic to our reflected operators
    # instead of coercing the Var into an object array.
    __array_ufunc__ = None

    def __init__(self, tape: Tape, value: np.ndarray, parents, name: str):
        # A single reduction flags NaN/Inf (any non-finite entry makes the sum
        # non-finite) without allocating a bool mask on large arrays.
        if not np.isfinite(value.sum()):
            raise PoisonedValueError(f"primitive '{name}' produced a non-finite value")
        self.tape = tape
        self.value = value
        self.name = name
        self.parents = parents  # tuple of (Var, vjp) pairs
        self.grad: np.ndarray | None = None
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var({self.name}, shape={self.value.shape})"

    # -- operator sugar --------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return powc(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def value_of(x):
    """Raw numpy value of ``x`` whether it is a Var or already an array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("no Var among operands")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` reversing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(name: str, value: np.ndarray, *edges) -> Var:
    """Create a node; edges are (operand, vjp) pairs, non-Var operands dropped."""
    tape = _tape_of(*[e[0] for e in edges])
    parents = tuple((p, fn) for p, fn in edges if isinstance(p, Var))
    return Var(tape, np.asarray(value, dtype=np.float64), parents, name)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return np.add(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    return _node(
        "add", av + bv,
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    )


def sub(a, b):
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return np.subtract(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    return _node(
        "sub", av - bv,
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    )


def mul(a, b):
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return np.multiply(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    return _node(
        "mul", av * bv,
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return np.divide(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    return _node(
        "div", av / bv,
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
    )


def powc(a, p: float):
    """Elementwise power with a constant exponent."""
    if not isinstance(a, Var):
        return np.power(value_of(a), p)
    av = a.value
    return _node("pow", av ** p, (a, lambda g: g * p * av ** (p - 1)))


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def _unary(name: str, a, fwd: Callable, dfd: Callable):
    if not isinstance(a, Var):
        return fwd(value_of(a))
    out = fwd(a.value)
    return _node(name, out, (a, lambda g: g * dfd(a.value, out)))


def exp(a):
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a):
    return _unary("log", a, np.log, lambda x, y: 1.0 / x)


def sqrt(a):
    return _unary("sqrt", a, np.sqrt, lambda x, y: 0.5 / y)


def sin(a):
    return _unary("sin", a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    return _unary("cos", a, np.cos, lambda x, y: -np.sin(x))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Evaluate from the non-overflowing side.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _unary("sigmoid", a, lambda x: _sigmoid(np.asarray(x, dtype=np.float64)),
                  lambda x, y: y * (1.0 - y))


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log sigmoid(x) = -softplus(-x), stable on both tails.
    t = np.log1p(np.exp(-np.abs(x)))
    return np.where(x > 0, -t, x - t)


def log_sigmoid(a):
    return _unary("log_sigmoid", a,
                  lambda x: _log_sigmoid(np.asarray(x, dtype=np.float64)),
                  lambda x, y: _sigmoid(-x))


# ---------------------------------------------------------------------------
# min / max / selection
# ---------------------------------------------------------------------------

def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return np.maximum(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    take_a = av >= bv
    return _node(
        "maximum", np.maximum(av, bv),
        (a, lambda g: _unbroadcast(g * take_a, av.shape)),
        (b, lambda g: _unbroadcast(g * ~take_a, bv.shape)),
    )


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first argument."""
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return np.minimum(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    take_a = av <= bv
    return _node(
        "minimum", np.minimum(av, bv),
        (a, lambda g: _unbroadcast(g * take_a, av.shape)),
        (b, lambda g: _unbroadcast(g * ~take_a, bv.shape)),
    )


def clip(a, lo: float, hi: float):
    return minimum(maximum(a, lo), hi)


def where(cond, a, b):
    """Select by a plain boolean array; the condition carries no gradient."""
    cond = np.asarray(cond, dtype=bool)
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return np.where(cond, value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    return _node(
        "where", np.where(cond, av, bv),
        (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), av.shape)),
        (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), bv.shape)),
    )


# ---------------------------------------------------------------------------
# reductions and shape surgery
# ---------------------------------------------------------------------------

def vsum(a, axis=None, keepdims: bool = False):
    if not isinstance(a, Var):
        return np.sum(value_of(a), axis=axis, keepdims=keepdims)
    av = a.value

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, av.shape).copy()

    return _node("sum", np.sum(av, axis=axis, keepdims=keepdims), (a, vjp))


# keep the numpy-style name available for generic code
sum = vsum  # noqa: A001


def mean(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return vsum(a, axis=axis, keepdims=keepdims) / float(n)


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(value_of(a), shape)
    old = a.value.shape
    return _node("reshape", a.value.reshape(shape), (a, lambda g: g.reshape(old)))


def transpose(a, axes=None):
    if not isinstance(a, Var):
        return np.transpose(value_of(a), axes)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inv = np.argsort(axes)
    return _node("transpose", np.transpose(a.value, axes),
                 (a, lambda g: np.transpose(g, inv)))


def _gather_repeats(idx) -> bool:
    """True when indexing uses integer arrays, which may repeat positions."""
    if isinstance(idx, np.ndarray):
        return idx.dtype != bool
    if isinstance(idx, tuple):
        return builtins.any(isinstance(i, np.ndarray) and i.dtype != bool
                            for i in idx)
    return False


def getitem(a, idx):
    if not isinstance(a, Var):
        return np.asarray(value_of(a)[idx], dtype=np.float64)
    av = a.value

    def vjp(g):
        z = np.zeros_like(av)
        if _gather_repeats(idx):
            np.add.at(z, idx, g)  # integer gather may repeat positions
        else:
            z[idx] = g
        return z

    return _node("getitem", np.asarray(av[idx], dtype=np.float64), (a, vjp))


def _seq_join(name: str, parts: Sequence, joined: np.ndarray, slicer) -> Var:
    edges = []
    for k, p in enumerate(parts):
        if isinstance(p, Var):
            edges.append((p, (lambda kk: lambda g: slicer(g, kk))(k)))
    tape = _tape_of(*[e[0] for e in edges])
    return Var(tape, joined, tuple(edges), name)


def stack(parts: Sequence, axis: int = 0):
    vals = [value_of(p) for p in parts]
    joined = np.stack(vals, axis=axis)
    if not builtins.any(isinstance(p, Var) for p in parts):
        return joined
    return _seq_join("stack", parts, joined,
                     lambda g, k: np.take(g, k, axis=axis))


def concatenate(parts: Sequence, axis: int = 0):
    vals = [value_of(p) for p in parts]
    joined = np.concatenate(vals, axis=axis)
    if not builtins.any(isinstance(p, Var) for p in parts):
        return joined
    offsets = np.cumsum([0] + [v.shape[axis] for v in vals])

    def slicer(g, k):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(offsets[k], offsets[k + 1])
        return g[tuple(sl)]

    return _seq_join("concatenate", parts, joined, slicer)


def embed(a, full_shape, slices):
    """Place ``a`` into a zero array of ``full_shape`` at ``slices``."""
    if not isinstance(a, Var):
        out = np.zeros(full_shape, dtype=np.float64)
        out[slices] = value_of(a)
        return out
    out = np.zeros(full_shape, dtype=np.float64)
    out[slices] = a.value
    return _node("embed", out, (a, lambda g: g[slices]))


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------

def matmul(a, b):
    """numpy-semantics matmul including batch broadcasting and 1-d operands."""
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return np.matmul(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)

    def vjp_a(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if av.ndim >= 2 else g * bv
        elif av.ndim == 1:
            ga = np.matmul(np.swapaxes(bv, -1, -2), g[..., None])[..., 0]
            ga = _unbroadcast(ga, av.shape) if ga.shape != av.shape else ga
        else:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        return _unbroadcast(ga, av.shape)

    def vjp_b(g):
        if av.ndim == 1:
            gb = np.multiply.outer(av, g) if bv.ndim >= 2 else av * g
        elif bv.ndim == 1:
            gb = np.matmul(np.swapaxes(av, -1, -2), g[..., None])[..., 0]
        else:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(gb, bv.shape)

    return _node("matmul", out, (a, vjp_a), (b, vjp_b))


def l2norm(a):
    """Euclidean norm of a flattened array, smoothed so d/dx exists at 0."""
    return sqrt(vsum(mul(a, a)) + NORM_EPS * NORM_EPS)


# ---------------------------------------------------------------------------
# backward pass and the parameter-block API
# ---------------------------------------------------------------------------

def backward(out: Var) -> None:
    """Reverse sweep seeding d(out)/d(out) = 1; fills ``grad`` on the path.

    Interior gradients are dropped as soon as they have been propagated, so
    peak memory stays near the forward pass's; leaves keep theirs.
    """
    if out.value.size != 1:
        raise ValueError("backward target must be scalar")
    out.grad = np.ones_like(out.value)
    nodes = out.tape.nodes
    stop = nodes.index(out) if nodes[-1] is not out else len(nodes) - 1
    for i in range(stop, -1, -1):
        node = nodes[i]
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib
        if node.parents:
            node.grad = None  # free interior buffers; leaves keep theirs


def _param_blocks(params) -> dict[str, np.ndarray]:
    return {
        "pose": np.asarray(params.pose, dtype=np.float64),
        "shape": np.asarray(params.shape, dtype=np.float64),
        "log_scale": np.asarray(params.log_scale, dtype=np.float64),
        "translation": np.asarray(params.translation, dtype=np.float64),
        "focal": np.atleast_1d(np.asarray(params.focal_length, dtype=np.float64)),
    }


def _with_blocks(params, blocks: dict):
    focal = blocks["focal"]
    if isinstance(focal, np.ndarray):
        focal = float(focal.reshape(-1)[0])
    return dataclasses.replace(
        params,
        pose=blocks["pose"],
        shape=blocks["shape"],
        log_scale=blocks["log_scale"],
        translation=blocks["translation"],
        focal_length=focal,
    )


def record_and_backward(energy: Callable, params):
    """Evaluate ``energy`` once on a fresh tape and return (value, gradients).

    ``params`` is a ParamState; gradients come back as a dict keyed by
    parameter block name with arrays matching each block's length (focal has
    length 1).  An energy that never touches the parameters may return a
    plain float, in which case all gradients are zero.
    """
    tape = Tape()
    blocks = _param_blocks(params)
    leaves = {name: tape.leaf(arr, name) for name, arr in blocks.items()}
    diff_params = dataclasses.replace(
        params,
        pose=leaves["pose"],
        shape=leaves["shape"],
        log_scale=leaves["log_scale"],
        translation=leaves["translation"],
        focal_length=getitem(leaves["focal"], 0),
    )
    out = energy(diff_params)
    if not isinstance(out, Var):
        value = float(np.asarray(out))
        return value, {name: np.zeros_like(arr) for name, arr in blocks.items()}
    backward(out)
    grads = {}
    for name, leaf in leaves.items():
        grads[name] = np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad
    return float(out.value), grads


@dataclasses.dataclass
class FiniteDiffReport:
    """Comparison of analytic and central-difference gradients per block."""

    max_rel_error: dict[str, float]
    per_coord: dict[str, np.ndarray]
    excluded: list[tuple[str, int]]

    @property
    def worst(self) -> float:
        vals = [v for v in self.max_rel_error.values()]
        return max(vals) if vals else 0.0


def finite_diff_check(energy: Callable, params, h: float = 1e-5,
                      kink_tol: float = 1e-3) -> FiniteDiffReport:
    """Central-difference check of ``record_and_backward`` gradients.

    Relative error uses a max(1, |analytic|) denominator.  Coordinates where
    the forward and backward one-sided slopes disagree (a kink under the
    difference stencil, e.g. an exact min/max tie) are excluded from the
    per-block maxima and reported separately.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    _, grads = record_and_backward(energy, params)
    blocks = _param_blocks(params)
    f0 = float(value_of(energy(params)))
    max_err: dict[str, float] = {}
    per_coord: dict[str, np.ndarray] = {}
    excluded: list[tuple[str, int]] = []
    for name, base in blocks.items():
        errs = np.zeros(base.size)
        for i in range(base.size):
            bumped = dict(blocks)
            plus = base.copy()
            plus.flat[i] += h
            bumped[name] = plus
            f_plus = float(value_of(energy(_with_blocks(params, bumped))))
            minus = base.copy()
            minus.flat[i] -= h
            bumped[name] = minus
            f_minus = float(value_of(energy(_with_blocks(params, bumped))))
            central = (f_plus - f_minus) / (2.0 * h)
            fwd = (f_plus - f0) / h
            bwd = (f0 - f_minus) / h
            analytic = float(grads[name].flat[i])
            denom = max(1.0, abs(analytic))
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(central)):
                excluded.append((name, i))
                errs[i] = np.nan
                continue
            errs[i] = abs(analytic - central) / denom
        per_coord[name] = errs
        finite = errs[np.isfinite(errs)]
        max_err[name] = float(finite.max()) if finite.size else 0.0
    return FiniteDiffReport(max_err, per_coord, excluded)
