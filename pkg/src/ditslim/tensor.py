"""Dense float64 tensors with a per-step reverse-mode gradient tape.

Design constraints, in order: correctness under finite-difference checking,
bitwise determinism for a fixed seed, and small enough surface to audit.
Elementwise ops broadcast only by left-padding the smaller operand's shape
(leading-batch expansion); anything fancier needs an explicit reshape.
Everything is float64.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, EvaluationError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "stop_recording",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "slice_axis0",
    "concat",
    "sum_all",
    "mean_all",
    "sum_lastdim",
    "softmax_lastdim",
    "rmsnorm",
    "activation",
    "silu",
    "sigmoid",
    "rotate_pairs",
    "stop_gradient",
    "straight_through",
    "backward",
    "grad_check",
    "GradCheckReport",
    "seeded_rng",
    "count_flops",
    "FlopCounter",
]


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator; the single RNG entry point for the package."""
    return np.random.Generator(np.random.PCG64(int(seed)))


class Tensor:
    """A dense float64 array, treated as immutable once created.

    ``grad`` is populated on leaves by ``Tape.backward`` and holds the
    accumulated gradient of the most recent backward pass.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, copy: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True) if copy else np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # arithmetic sugar; all routed through the module-level ops
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


class _Node:
    __slots__ = ("out", "inputs", "grad_fns")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fns: tuple[Callable, ...]):
        self.out = out
        self.inputs = inputs
        self.grad_fns = grad_fns


_TAPE_STACK: list["Tape | None"] = []


def _active() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered op record for one training step. Single-owner, freed on exit.

    Node order is creation order, which is a topological order by
    construction; backward walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.stop_markers: set[int] = set()
        self._out_ids: set[int] = set()
        self._freed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()
        self.nodes.clear()
        self._out_ids.clear()
        self.stop_markers.clear()
        self._freed = True

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fns: tuple[Callable, ...], stop: bool = False) -> None:
        if stop:
            self.stop_markers.add(len(self.nodes))
        self.nodes.append(_Node(out, inputs, grad_fns))
        self._out_ids.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate gradients of ``loss`` into every reachable leaf.

        Returns a map from leaf tensor to its gradient; leaves also get
        ``.grad`` set. Nodes behind stop markers contribute nothing upstream.
        """
        if self._freed:
            raise ContractError("tape already freed; backward must run inside the tape context")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if id(loss) not in self._out_ids:
            raise ContractError("loss tensor is not attached to this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for idx in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[idx]
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if idx in self.stop_markers:
                continue
            for inp, fn in zip(node.inputs, node.grad_fns):
                contrib = fn(g)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
                if key not in self._out_ids:
                    leaves[key] = inp

        result: dict[Tensor, np.ndarray] = {}
        for key, tensor in leaves.items():
            if key in grads:
                tensor.grad = grads[key]
                result[tensor] = grads[key]
        return result


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Free-function spelling of ``tape.backward(loss)``."""
    return tape.backward(loss)


@contextmanager
def stop_recording():
    """Run a region without recording ops; outputs come back as constants."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def _record(out: Tensor, inputs: tuple[Tensor, ...], grad_fns: tuple[Callable, ...], stop: bool = False) -> Tensor:
    tape = _active()
    if tape is not None:
        tape._record(out, inputs, grad_fns, stop=stop)
    return out


# ---------------------------------------------------------------------------
# elementwise ops (suffix-aligned broadcasting only)
# ---------------------------------------------------------------------------


def _check_suffix(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small != big[len(big) - len(small):]:
        raise ShapeError(f"elementwise shapes {sa} and {sb} do not align by leading-batch expansion")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data + float(b))
        return _record(out, (a,), (lambda g: g,))
    _check_suffix(a.shape, b.shape)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data - float(b))
        return _record(out, (a,), (lambda g: g,))
    _check_suffix(a.shape, b.shape)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        out = Tensor(a.data * c)
        return _record(out, (a,), (lambda g: g * c,))
    _check_suffix(a.shape, b.shape)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        (lambda g: _reduce_to(g * b.data, a.shape), lambda g: _reduce_to(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), (lambda g: -g,))


# ---------------------------------------------------------------------------
# matmul and structural ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product over the trailing two axes. Leading axes must match exactly,
    or one operand is 2-D and is shared across the other's leading axes."""
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul inner extents differ: {sa} x {sb}")
    la, lb = sa[:-2], sb[:-2]
    if la != lb and la and lb:
        raise ShapeError(f"matmul leading extents differ: {sa} x {sb}")
    out_data = np.matmul(a.data, b.data)

    counters = _FLOP_COUNTERS
    if counters:
        batch = 1
        for e in (la or lb):
            batch *= e
        flops = 2 * batch * sa[-2] * sa[-1] * sb[-1]
        for c in counters:
            c.add(flops)

    def da(g: np.ndarray) -> np.ndarray:
        return _reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), sa)

    def db(g: np.ndarray) -> np.ndarray:
        return _reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), sb)

    return _record(Tensor(out_data), (a, b), (da, db))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    src = a.shape
    return _record(out, (a,), (lambda g: g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record(out, (a,), (lambda g: np.transpose(g, inv),))


def slice_axis0(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[start:stop])

    def da(g: np.ndarray) -> np.ndarray:
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return full

    return _record(out, (a,), (da,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat needs at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def make_fn(i: int) -> Callable:
        lo, hi = offsets[i], offsets[i + 1]

        def fn(g: np.ndarray) -> np.ndarray:
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return fn

    return _record(out, tuple(parts), tuple(make_fn(i) for i in range(len(parts))))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record(out, (a,), (lambda g: np.full(a.shape, g),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.sum() / n)
    return _record(out, (a,), (lambda g: np.full(a.shape, g / n),))


def sum_lastdim(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(axis=-1))
    return _record(out, (a,), (lambda g: np.broadcast_to(g[..., None], a.shape).copy(),))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis; rows sum to one."""
    if x.data.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def dx(g: np.ndarray) -> np.ndarray:
        return s * (g - (g * s).sum(axis=-1, keepdims=True))

    return _record(out, (x,), (dx,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = Tensor(s)
    return _record(out, (x,), (lambda g: g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = Tensor(x.data * s)
    return _record(out, (x,), (lambda g: g * (s + x.data * s * (1.0 - s)),))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


_ACTIVATIONS = {"silu": silu, "sigmoid": sigmoid}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation kind {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis with a learned gain."""
    n = x.data.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + eps
    inv = ms ** -0.5
    out = Tensor(x.data * inv * gain.data)

    def dx(g: np.ndarray) -> np.ndarray:
        gh = g * gain.data
        dot = (gh * x.data).sum(axis=-1, keepdims=True)
        return inv * gh - (inv ** 3 / n) * x.data * dot

    def dgain(g: np.ndarray) -> np.ndarray:
        return _reduce_to(g * x.data * inv, gain.shape)

    return _record(out, (x, gain), (dx, dgain))


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved (even, odd) pairs of the last axis by fixed angles.

    ``cos``/``sin`` have the shape of the even-slot view and are constants:
    gradients flow into ``x`` only. Rotations preserve the per-row norm.
    """
    if x.data.shape[-1] % 2 != 0:
        raise ShapeError(f"rotate_pairs needs an even last axis, got {x.shape}")
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos

    def dx(g: np.ndarray) -> np.ndarray:
        ge = g[..., 0::2]
        go = g[..., 1::2]
        full = np.empty_like(g)
        full[..., 0::2] = ge * cos + go * sin
        full[..., 1::2] = -ge * sin + go * cos
        return full

    return _record(Tensor(out_data), (x,), (dx,))


# ---------------------------------------------------------------------------
# gradient-flow control
# ---------------------------------------------------------------------------


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in value; the node is a stop marker, so nothing flows upstream."""
    out = Tensor(x.data)
    return _record(out, (x,), (lambda g: g,), stop=True)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward the discrete ``hard`` value exactly; backpropagate as if the
    output were ``soft``. Computed structurally, not as hard + soft - soft,
    so the forward value is bit-exact."""
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through shapes differ: {hard.shape} vs {soft.shape}")
    out = Tensor(np.array(hard, dtype=np.float64, copy=True))
    return _record(out, (soft,), (lambda g: g,))


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare the taped gradient of scalar-valued ``f`` at ``x`` against
    central finite differences, coordinate by coordinate.

    Relative error uses max(|analytic|, |numeric|, 1e-8) in the denominator.
    Paths cut by stop_gradient are exempt by construction: the checker
    validates the analytic (differentiable) path, and ``f`` must route any
    intentionally frozen factors through stop_gradient on both evaluations.
    """
    with Tape() as tape:
        y = f(x)
        if y.data.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got output shape {y.data.shape}")
        if not np.isfinite(y.data).all():
            raise EvaluationError("grad_check: f(x) is not finite")
        grads = tape.backward(y)
    analytic = grads.get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)

    base = x.data
    numeric = np.zeros_like(base)
    flat_n = numeric.reshape(-1)
    flat_b = base.reshape(-1)
    for i in range(flat_b.size):
        orig = flat_b[i]
        pert = base.copy().reshape(-1)
        pert[i] = orig + step
        fp = f(Tensor(pert.reshape(base.shape))).item()
        pert[i] = orig - step
        fm = f(Tensor(pert.reshape(base.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError("grad_check: perturbed evaluation is not finite")
        flat_n[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel <= tol)


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation
# ---------------------------------------------------------------------------


class FlopCounter:
    """Counts 2*m*k*n per matmul executed while installed. Elementwise ops,
    softmax, norms, and activations are intentionally not counted."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += n


_FLOP_COUNTERS: list[FlopCounter] = []


@contextmanager
def count_flops():
    counter = FlopCounter()
    _FLOP_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _FLOP_COUNTERS.remove(counter)
