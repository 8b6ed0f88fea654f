"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Tensors are matrices (``rows x cols``); every op also accepts an optional
leading batch axis, so one tape can carry a whole mini-batch of posts.  Ops
record their parents and a local backward rule; :func:`backward` walks the
recorded nodes in exact reverse recording order.

Gradients of weights shared across a batch axis are summed over that axis.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

ROW_NORM_EPS = 1e-12

# direct ufunc reductions skip the ndarray-method wrappers (hot path)
_sum = np.add.reduce
_max = np.maximum.reduce

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _check_enabled() -> bool:
    return getattr(_state, "check_finite", False)


@contextmanager
def no_grad():
    """Evaluate without recording (used by finite differences and evaluation)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def check_finite():
    """Raise :class:`NonFiniteError` as soon as any op produces NaN/Inf."""
    prev = _check_enabled()
    _state.check_finite = True
    try:
        yield
    finally:
        _state.check_finite = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "forward_fn", "seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.forward_fn: Callable[..., np.ndarray] | None = None
        self.seq = next(_seq)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, forward_fn) -> Tensor:
    """Wrap an op result.  ``forward_fn(*parent_data)`` recomputes ``data`` on replay."""
    flags = _state.__dict__
    if flags.get("check_finite", False) and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by " + getattr(forward_fn, "__qualname__", "op"))
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.seq = next(_seq)
    out.name = None
    needs = flags.get("grad_enabled", True) and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.parents = parents
        out.backward_fn = backward_fn
        out.forward_fn = forward_fn
    else:
        out.parents = ()
        out.backward_fn = None
        out.forward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape


@dataclass
class Tape:
    """Nodes reachable from a root, ordered as they were recorded."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        seen: set[int] = set()
        stack = [root]
        nodes = []
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t.parents)
        nodes.sort(key=lambda t: t.seq)
        return cls(nodes)

    @property
    def root(self) -> Tensor:
        return self.nodes[-1]

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.requires_grad and t.backward_fn is None]

    def downstream(self, leaf: Tensor) -> list[Tensor]:
        """Recorded ops that (transitively) read ``leaf``, in recording order."""
        dirty = {id(leaf)}
        out = []
        for node in self.nodes:
            if node.forward_fn is not None and any(id(p) in dirty for p in node.parents):
                dirty.add(id(node))
                out.append(node)
        return out

    def replay(self, ops: Sequence[Tensor]) -> float:
        """Recompute ``ops`` from their parents' current data; returns the root value.

        Op results are overwritten in place, so the tape should not be
        backpropagated after a replay with changed leaves.
        """
        for node in ops:
            node.data = node.forward_fn(*[p.data for p in node.parents])
        return float(self.root.data.reshape(-1)[0])


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar root, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), np.add)


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), np.subtract)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (numpy broadcasting)."""
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), np.multiply)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), lambda x: x * c)


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,), lambda x: x + c)


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), np.log)


def _relu(x):
    return np.where(x > 0, x, 0.0)


def relu(a: Tensor) -> Tensor:
    """max(x, 0); derivative taken as 0 at x == 0."""
    mask = a.data > 0
    return _make(_relu(a.data), (a,), lambda g: (g * mask,), _relu)


def hinge(margin: float, x: Tensor) -> Tensor:
    """max(margin - x, 0)."""
    return relu(add_scalar(scale(x, -1.0), margin))


# ---------------------------------------------------------------------------
# matrix ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading batch axis broadcast)."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim == 3 and ad.shape[1] == g.shape[1]:
                # shared weight: fold the batch axis into rows
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, np.matmul)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), lambda x: x.reshape(shape))


def _swap(x):
    return np.swapaxes(x, -1, -2)


def transpose(a: Tensor) -> Tensor:
    return _make(_swap(a.data), (a,), lambda g: (_swap(g),), _swap)


def _softmax(x):
    e = np.exp(x - _max(x, axis=-1, keepdims=True))
    e /= _sum(e, axis=-1, keepdims=True)
    return e


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with row-max subtraction."""
    y = _softmax(x.data)

    def bw(g):
        return (y * (g - _sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, _softmax)


def _cat_rows(a, b):
    return np.concatenate([a, b], axis=-2)


def _cat_cols(a, b):
    return np.concatenate([a, b], axis=-1)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a``'s rows above ``b``'s."""
    if a.shape[-1] != b.shape[-1] or a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat_rows: column mismatch {a.shape} vs {b.shape}")
    m = a.shape[-2]
    return _make(_cat_rows(a.data, b.data), (a, b), lambda g: (g[..., :m, :], g[..., m:, :]), _cat_rows)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_cols: row mismatch {a.shape} vs {b.shape}")
    n = a.shape[-1]
    return _make(_cat_cols(a.data, b.data), (a, b), lambda g: (g[..., :n], g[..., n:]), _cat_cols)


def _stack(*rows):
    return np.concatenate([r.reshape(1, -1) for r in rows], axis=0)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1xF tensors into a BxF tensor."""
    if not rows:
        raise ShapeError("stack_rows: nothing to stack")
    shapes = [r.shape for r in rows]
    return _make(_stack(*(r.data for r in rows)), tuple(rows), lambda g: tuple(g[i].reshape(s) for i, s in enumerate(shapes)), _stack)


def mean_pool_rows(x: Tensor) -> Tensor:
    """Column-wise mean over rows: ``[..., m, F] -> [..., 1, F]``."""
    m = x.shape[-2]
    if m < 1:
        raise ShapeError("mean_pool_rows: empty input")
    shape = x.shape

    def fwd(a):
        return _sum(a, axis=-2, keepdims=True) / m

    return _make(fwd(x.data), (x,), lambda g: (np.broadcast_to(g / m, shape).copy(),), fwd)


def _row_sums(a):
    return _sum(a, axis=-1, keepdims=True)


def sum_cols(x: Tensor) -> Tensor:
    """Row sums: ``[..., m, n] -> [..., m, 1]``."""
    shape = x.shape
    return _make(_row_sums(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), _row_sums)


def _total(a):
    return np.array([[a.sum()]])


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(_total(x.data), (x,), lambda g: (np.full(shape, g.item()),), _total)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape

    def fwd(a):
        return np.array([[a.sum() / n]])

    return _make(fwd(x.data), (x,), lambda g: (np.full(shape, g.item() / n),), fwd)


def _frob(a):
    return np.array([[np.sqrt(_sum((a * a).reshape(-1)))]])


def frobenius_norm(x: Tensor) -> Tensor:
    """sqrt(sum x^2); the gradient at the zero tensor is taken as 0."""
    out = _frob(x.data)
    n = out[0, 0]
    xd = x.data

    def bw(g):
        if n == 0.0:
            return (np.zeros_like(xd),)
        return (g.item() * xd / n,)

    return _make(out, (x,), bw, _frob)


def row_l2_normalize(x: Tensor, eps: float = ROW_NORM_EPS) -> Tensor:
    """Divide each row by sqrt(sum(row^2) + eps)."""

    def fwd(a):
        return a / np.sqrt(_sum(a * a, axis=-1, keepdims=True) + eps)

    xd = x.data
    r = np.sqrt(_sum(xd * xd, axis=-1, keepdims=True) + eps)
    y = xd / r

    def bw(g):
        return ((g - y * _sum(g * y, axis=-1, keepdims=True)) / r,)

    return _make(y, (x,), bw, fwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (``V x F``) for an integer id array."""
    ids = np.asarray(ids, dtype=np.int64)
    V, F = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ShapeError(f"embedding: token id out of range [0, {V})")

    def bw(g):
        out = np.zeros((V, F))
        np.add.at(out, ids.reshape(-1), g.reshape(-1, F))
        return (out,)

    return _make(table.data[ids], (table,), bw, lambda t: t[ids])


def cross_entropy(logits: Tensor, label: int | Sequence[int]) -> Tensor:
    """Mean of -log softmax(logits)[label] over rows (a single row gives the plain loss)."""
    C = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n = logits.data.size // C
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows but {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"cross_entropy: label out of range [0, {C})")
    rows = np.arange(n)

    def lse_of(x):
        lg = x.reshape(n, C)
        mx = _max(lg, axis=1, keepdims=True)
        return lg, mx[:, 0] + np.log(_sum(np.exp(lg - mx), axis=1))

    def fwd(x):
        lg, lse = lse_of(x)
        return np.array([[_sum(lse - lg[rows, labels]) / n]])

    lg, lse = lse_of(logits.data)
    shape = logits.shape

    def bw(g):
        p = np.exp(lg - lse[:, None])
        p[rows, labels] -= 1.0
        return ((g.item() / n) * p.reshape(shape),)

    return _make(fwd(logits.data), (logits,), bw, fwd)


def log_weighted_softmax_mass(logits: Tensor, weights: np.ndarray) -> Tensor:
    """Per row ``log(sum_j w_j e^{x_j} / sum_j e^{x_j})`` as an ``m x 1`` tensor.

    Stabilized with the row max; ``weights`` is a constant, non-negative matrix.
    """
    w = np.asarray(weights, dtype=np.float64)

    def parts(x):
        e = np.exp(x - _max(x, axis=-1, keepdims=True))
        return e, _sum(e, axis=-1, keepdims=True), _sum(w * e, axis=-1, keepdims=True)

    def fwd(x):
        _, den, num = parts(x)
        return np.log(num) - np.log(den)

    e, den, num = parts(logits.data)

    def bw(g):
        return (g * (w * e / num - e / den),)

    return _make(np.log(num) - np.log(den), (logits,), bw, fwd)


def sum_tensors(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    """Per-parameter worst relative errors.

    ``max_rel_error`` only counts entries whose absolute discrepancy exceeds
    ``noise_floor``, the roundoff resolution of central differences at this
    loss value and step; ``raw_max_rel_error`` counts every entry.
    """

    max_rel_error: dict[str, float]
    tol: float
    h: float
    n_checked: int
    raw_max_rel_error: dict[str, float] = field(default_factory=dict)
    noise_floor: float = 0.0
    n_unresolved: int = 0

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if not v < self.tol}

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def raw_worst(self) -> float:
        return max(self.raw_max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{'ok ' if v < self.tol else 'BAD'} {k}: max rel err {v:.3e}" for k, v in self.max_rel_error.items()]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(
            f"{verdict}: {self.n_checked} entries, worst {self.worst:.3e}, tol {self.tol:g}, h {self.h:g}; "
            f"{self.n_unresolved} entries within the {self.noise_floor:.1e} difference noise floor "
            f"(worst over all entries {self.raw_worst:.3e})"
        )
        return "\n".join(lines)


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def fd_noise_floor(f: float, h: float, factor: float = 4.0) -> float:
    """Absolute roundoff resolution of a float64 central difference of ``f`` with step ``h``."""
    return factor * np.finfo(np.float64).eps * max(1.0, abs(f)) / h


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-valued ``fn`` wrt every entry of ``param``.

    Re-runs ``fn`` from scratch for each perturbation.
    """
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return out


def replay_numerical_gradient(tape: Tape, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences that recompute only the ops downstream of ``param``."""
    ops = tape.downstream(param)
    out = np.zeros_like(param.data)
    if not ops:
        return out
    saved = [node.data for node in ops]
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = tape.replay(ops)
            flat[i] = orig - h
            fm = tape.replay(ops)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    finally:
        for node, data in zip(ops, saved):
            node.data = data
    return out


def grad_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    analytic: dict[str, np.ndarray] | None = None,
    replay: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must be deterministic.  With ``replay`` the recorded graph is
    re-executed from each perturbed parameter instead of calling ``fn``
    again.  ``analytic`` overrides the backward-pass gradients (used to probe
    the checker with a corrupted gradient).
    """
    for p in params.values():
        p.grad = None
    root = fn()
    f0 = root.item()
    tape = backward(root)
    if analytic is None:
        analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    noise = fd_noise_floor(f0, h)
    errors, raw = {}, {}
    n = unresolved = 0
    for name, p in params.items():
        if replay:
            num = replay_numerical_gradient(tape, p, h)
        else:
            num = numerical_gradient(fn, p, h)
        rel = relative_error(analytic[name], num)
        within = np.abs(analytic[name] - num) <= noise
        raw[name] = float(rel.max()) if rel.size else 0.0
        errors[name] = float(np.where(within, 0.0, rel).max()) if rel.size else 0.0
        unresolved += int(np.count_nonzero(within & (rel >= tol)))
        n += num.size
    return GradCheckReport(errors, tol, h, n, raw, noise, unresolved)


def assert_finite(x: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{what} contains NaN/Inf")


__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "tensor", "no_grad", "check_finite",
    "backward", "add", "sub", "mul", "scale", "add_scalar", "log", "relu", "hinge", "matmul",
    "reshape", "transpose", "softmax_rows", "concat_rows", "concat_cols", "stack_rows",
    "mean_pool_rows", "sum_cols", "mean_all", "sum_all", "frobenius_norm", "row_l2_normalize",
    "embedding", "cross_entropy", "log_weighted_softmax_mass", "sum_tensors", "GradCheckReport",
    "relative_error", "fd_noise_floor", "numerical_gradient", "replay_numerical_gradient", "grad_check", "assert_finite",
]
