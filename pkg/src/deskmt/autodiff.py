"""Dense tensors with reverse-mode automatic differentiation.

Everything trains in float32. A float64 mode exists because central
finite differences are meaningless at single precision: build the leaf
tensors with ``dtype=np.float64`` and every downstream op follows.

Graph nodes hold references to their parents only, so a finished step's
graph is reclaimed by reference counting as soon as the loss goes out of
scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckError,
    ConfigError,
    ContractError,
    DegenerateBatchError,
    ShapeError,
)


class Rng:
    """Philox-backed deterministic stream, splittable by integer index.

    The same (seed, spawn path) and the same draw sequence produce
    bit-identical output on every platform numpy supports. ``split(i)``
    derives an independent child stream without disturbing the parent,
    so dropout, shuffling, and initialization can each own a stream.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.spawn_key = tuple(int(k) for k in spawn_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, index: int) -> "Rng":
        return Rng(self.seed, self.spawn_key + (int(index),))

    def random(self, shape):
        """Uniform float64 draws in [0, 1)."""
        return self._gen.random(shape)

    def uniform(self, low, high, shape):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int):
        return self._gen.permutation(n)

    def state(self) -> dict:
        """JSON-serializable snapshot, including buffered draws."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "spawn_key": list(self.spawn_key),
            "counter": [int(x) for x in st["state"]["counter"]],
            "key": [int(x) for x in st["state"]["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["spawn_key"]))
        rng._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return rng


class Tensor:
    """A dense float array plus an optional gradient of the same shape.

    Tensors produced by ops carry a closure that routes the incoming
    gradient to their parents; leaves just accumulate into ``grad``.
    Data is treated as immutable once wrapped (the optimizer, the one
    sanctioned writer, updates parameters in place between steps).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backprop = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar over the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    # Gradients are never mutated in place, so sharing the array is safe.
    t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: tuple, backprop) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backprop = backprop
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backprop(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backprop)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backprop(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backprop)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backprop(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backprop)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    data = a.data * c

    def backprop(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _make(data, (a,), backprop)


def matmul(a, b) -> Tensor:
    """Matrix product for rank-2 and rank-3 operands.

    A rank-3 operand carries a leading batch extent; a rank-2 operand
    broadcasts across the other side's batch.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul: ranks must be 2 or 3, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch extents disagree for {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backprop(g):
        # A rank-2 side that was broadcast across the batch folds the
        # batch axis back with a sum.
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if ga.ndim > a.ndim:
                ga = ga.sum(axis=0)
            _accum(a, ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if gb.ndim > b.ndim:
                gb = gb.sum(axis=0)
            _accum(b, gb)

    return _make(data, (a, b), backprop)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > 0
    data = np.where(keep, a.data, a.data.dtype.type(0))

    def backprop(g):
        if a.requires_grad:
            _accum(a, g * keep)

    return _make(data, (a,), backprop)


def sin(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sin(a.data)

    def backprop(g):
        if a.requires_grad:
            _accum(a, g * np.cos(a.data))

    return _make(data, (a,), backprop)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backprop(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), backprop)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def backprop(g):
        if a.requires_grad:
            _accum(a, np.transpose(g, inv))

    return _make(data, (a,), backprop)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum()

    def backprop(g):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, g))

    return _make(np.asarray(data), (a,), backprop)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean()
    inv_n = 1.0 / a.data.size

    def backprop(g):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, g * inv_n))

    return _make(np.asarray(data), (a,), backprop)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for overflow safety."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backprop(g):
        if a.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(a, s * (g - dot))

    return _make(s, (a,), backprop)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} and bias {bias.shape} must both be ({n},)"
        )
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backprop(g):
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, n).sum(axis=0))
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _make(data, (x, gain, bias), backprop)


def dropout(x, p: float, training: bool, rng: Rng | None = None) -> Tensor:
    """Inverted dropout: zero with probability p and rescale survivors.

    Evaluation mode (or p == 0) returns the input tensor itself, so the
    identity is bit-exact by construction.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout: probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: training mode requires an Rng")
    keep = rng.random(x.shape) >= p
    coef = 1.0 / (1.0 - p)
    data = x.data * keep * x.data.dtype.type(coef)

    def backprop(g):
        if x.requires_grad:
            _accum(x, g * keep * x.data.dtype.type(coef))

    return _make(data, (x,), backprop)


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` by integer index array ``ids``."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ContractError(
            f"embedding: ids out of range for table with {v} rows "
            f"(min {ids.min()}, max {ids.max()})"
        )
    data = table.data[ids]

    def backprop(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids, g)
            _accum(table, acc)

    return _make(data, (table,), backprop)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Fused log-softmax with max-subtraction."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    logp = z - lse

    def backprop(g):
        if a.requires_grad:
            p = np.exp(logp)
            _accum(a, g - p * g.sum(axis=axis, keepdims=True))

    return _make(logp, (a,), backprop)


def cross_entropy_masked(logits, targets, pad_id: int) -> Tensor:
    """Mean negative log-likelihood over non-pad target positions.

    ``logits`` is [batch, seq, vocab]; ``targets`` is an integer
    [batch, seq] array. Positions whose target equals ``pad_id``
    contribute nothing to the value or the gradient.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 3:
        raise ShapeError(f"cross_entropy_masked: logits must be rank 3, got {logits.shape}")
    if targets.shape != logits.shape[:2]:
        raise ShapeError(
            f"cross_entropy_masked: targets {targets.shape} must match logits "
            f"leading extents {logits.shape[:2]}"
        )
    vocab = logits.shape[-1]
    mask = targets != pad_id
    n = int(mask.sum())
    if n == 0:
        raise DegenerateBatchError("cross_entropy_masked: every target position is padding")
    safe = np.where(mask, targets, 0)
    if safe.min() < 0 or safe.max() >= vocab:
        raise ContractError(
            f"cross_entropy_masked: target ids outside vocab of size {vocab}"
        )

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n

    def backprop(g):
        if logits.requires_grad:
            d = np.exp(logp)
            np.subtract.at(d, (*np.nonzero(mask), safe[mask]), 1.0)
            d *= (mask[..., None] * (g / n)).astype(logits.data.dtype)
            _accum(logits, d)

    return _make(np.asarray(loss), (logits,), backprop)


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar. Running backward twice on the same scalar
    raises, preventing silent double accumulation.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward: expected a Tensor")
    if loss.data.ndim != 0:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._backward_ran:
        raise ContractError("backward: already ran for this scalar; build a fresh graph")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any requires_grad tensor")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backprop is not None:
            node._backprop(node.grad)
        if node is not loss and node._parents:
            node.grad = None  # free intermediates; leaves keep theirs
    loss._backward_ran = True


@dataclass
class GradCheckEntry:
    index: int
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    h: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max relative error {self.max_rel_err:.3e} vs tol {self.tol:.1e}"


def grad_check(f, params, h: float = 1e-5, tol: float = 1e-4,
               names=None, denom_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``f(params)`` against central differences.

    ``f`` must be deterministic (dropout off or rng pinned per call); this
    is verified by evaluating it twice. Relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, denom_floor).
    """
    params = list(params)
    if names is None:
        names = [f"param[{i}]" for i in range(len(params))]
    probe1 = f(params)
    probe2 = f(params)
    if not np.array_equal(probe1.data, probe2.data):
        raise CheckError("grad_check: function is not deterministic across calls")

    for p in params:
        p.grad = None
    loss = f(params)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.astype(np.float64)
                for p in params]

    report = GradCheckReport(tol=tol, h=h)
    for i, p in enumerate(params):
        worst = 0.0
        flat_analytic = analytic[i].reshape(-1)
        for j in range(p.data.size):
            idx = np.unravel_index(j, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(f(params).data)
            p.data[idx] = orig - h
            fm = float(f(params).data)
            p.data[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(flat_analytic[j])
            denom = max(abs(a), abs(numeric), denom_floor)
            rel = abs(a - numeric) / denom
            if rel > worst:
                worst = rel
        report.entries.append(GradCheckEntry(i, names[i], worst, worst < tol))
    return report
