"""Reverse-mode automatic differentiation on a per-step tape.

All arithmetic is float64. The graph is rebuilt each training step
(define-by-run): ops append records to the active tape, ``backward``
walks the records in reverse and accumulates adjoints into ``.grad``.
Gradient accumulation across several losses is additive until an
optimizer step consumes the grads.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the op (log/div/sqrt)."""


class TapeError(RuntimeError):
    """Backward requested on a stale or already-consumed graph."""


class Tensor:
    """Shaped float64 array participating in reverse-mode differentiation.

    ``requires_grad`` marks a leaf whose gradient should be accumulated
    (parameters, grad-check inputs). Tensors produced by ops are tracked
    automatically whenever any input is tracked; plain constants carry no
    node id and contribute no gradient.
    """

    __slots__ = ("values", "grad", "requires_grad", "_node_id", "_tape_gen")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node_id = None
        self._tape_gen = -1

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={_TAPE.is_tracked(self)})"

    # Thin operator sugar; every path goes through the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(values) -> Tensor:
    """Untracked tensor; never receives a gradient."""
    return Tensor(values, requires_grad=False)


def parameter(values, rng: np.random.Generator | None = None, scale: float = 0.1) -> Tensor:
    """Trainable leaf. ``values`` may be a shape tuple, in which case the
    entries are drawn from ``scale * N(0, 1)`` using ``rng``."""
    if isinstance(values, tuple):
        if rng is None:
            raise ValueError("parameter(shape) needs an rng for initialization")
        values = scale * rng.standard_normal(values)
    return Tensor(values, requires_grad=True)


class Tape:
    """Ordered record of op applications for one forward pass.

    Records are (out_id, inputs, backward_fn, op_name) tuples in
    construction order, which is topological by immutability. ``clear``
    advances the generation; node ids from older generations go stale.
    """

    def __init__(self):
        self.records = []
        self.generation = 0
        self._next_id = 0
        self._tensors = {}
        self._backwarded = set()

    def clear(self):
        self.records.clear()
        self._tensors.clear()
        self._backwarded.clear()
        self._next_id = 0
        self.generation += 1

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or (t._tape_gen == self.generation and t._node_id is not None)

    def _register(self, t: Tensor) -> int:
        t._node_id = self._next_id
        t._tape_gen = self.generation
        self._tensors[t._node_id] = t
        self._next_id += 1
        return t._node_id

    def _ensure_id(self, t: Tensor):
        if t._tape_gen != self.generation or t._node_id is None:
            self._register(t)

    def record(self, name: str, inputs, out_values, backward_fn) -> Tensor:
        out = Tensor(out_values)
        if any(self.is_tracked(t) for t in inputs):
            for t in inputs:
                if self.is_tracked(t):
                    self._ensure_id(t)
            out_id = self._register(out)
            self.records.append((out_id, tuple(inputs), backward_fn, name))
        return out


_TAPE = Tape()


def active_tape() -> Tape:
    return _TAPE


def clear_tape():
    _TAPE.clear()


def record_op(name, inputs, out_values, backward_fn) -> Tensor:
    """Register a custom op on the active tape (for ops with bespoke
    gradients, e.g. straight-through estimators)."""
    return _TAPE.record(name, tuple(inputs), out_values, backward_fn)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(ancestor) into ``.grad`` of every tracked
    ancestor. May be called once per loss node per tape; calling it again
    on the same loss without re-recording raises."""
    t = _TAPE
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape_gen != t.generation or loss._node_id is None:
        if loss.requires_grad:
            t._ensure_id(loss)
        else:
            raise TapeError("backward on a tensor not recorded on the active tape (stale tape?)")
    if loss._node_id in t._backwarded:
        raise TapeError("backward called twice on the same loss without re-recording")
    t._backwarded.add(loss._node_id)

    adjoints = {loss._node_id: np.ones_like(loss.values)}
    for out_id, inputs, backward_fn, _name in reversed(t.records):
        g = adjoints.get(out_id)
        if g is None:
            continue
        input_grads = backward_fn(g)
        for inp, ig in zip(inputs, input_grads):
            if ig is None or not t.is_tracked(inp):
                continue
            nid = inp._node_id
            if nid in adjoints:
                adjoints[nid] = adjoints[nid] + ig
            else:
                adjoints[nid] = ig
    for nid, adj in adjoints.items():
        tensor = t._tensors[nid]
        tensor.grad = adj.copy() if tensor.grad is None else tensor.grad + adj


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def _shape_check(name, a, b):
    if a.shape != b.shape and a.values.ndim != 0 and b.values.ndim != 0:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g, shape):
    # collapse a broadcast gradient back onto a 0-d operand
    if shape == ():
        return np.asarray(g.sum())
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("add", a, b)
    out = a.values + b.values

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _TAPE.record("add", (a, b), out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("sub", a, b)
    out = a.values - b.values

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _TAPE.record("sub", (a, b), out, bw)


def neg(a: Tensor) -> Tensor:
    return _TAPE.record("neg", (a,), -a.values, lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be a 0-d scalar."""
    _shape_check("mul", a, b)
    av, bv = a.values, b.values
    out = av * bv

    def bw(g):
        return _reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape)

    return _TAPE.record("mul", (a, b), out, bw)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _TAPE.record("scalar_mul", (a,), c * a.values, lambda g: (c * g,))


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient; denominator may be a 0-d scalar, never zero."""
    _shape_check("div", a, b)
    av, bv = a.values, b.values
    if np.any(bv == 0.0):
        raise DomainError("div: zero denominator")
    out = av / bv

    def bw(g):
        return _reduce_to(g / bv, a.shape), _reduce_to(-g * av / (bv * bv), b.shape)

    return _TAPE.record("div", (a, b), out, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim == 0 or bv.ndim == 0 or av.ndim > 2 or bv.ndim > 2:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if av.shape[-1] != (bv.shape[0] if bv.ndim >= 1 else None):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = av @ bv

    def bw(g):
        if av.ndim == 1 and bv.ndim == 1:  # dot -> 0-d
            return g * bv, g * av
        if av.ndim == 1:  # (k,) @ (k,m) -> (m,)
            return g @ bv.T, np.outer(av, g)
        if bv.ndim == 1:  # (n,k) @ (k,) -> (n,)
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _TAPE.record("matmul", (a, b), out, bw)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _TAPE.record("transpose", (a,), a.values.T.copy(), lambda g: (g.T,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _TAPE.record("sum", (a,), np.asarray(a.values.sum()),
                        lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.values.size
    return _TAPE.record("mean", (a,), np.asarray(a.values.mean()),
                        lambda g: (np.broadcast_to(g / n, shape).copy(),))


def concat(tensors) -> Tensor:
    tensors = list(tensors)
    for t in tensors:
        if t.values.ndim != 1:
            raise ShapeError(f"concat: expected vectors, got shape {t.shape}")
    sizes = [t.values.size for t in tensors]
    out = np.concatenate([t.values for t in tensors])
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _TAPE.record("concat", tuple(tensors), out, bw)


def stack_rows(tensors) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    tensors = list(tensors)
    n = tensors[0].values.size
    for t in tensors:
        if t.values.ndim != 1 or t.values.size != n:
            raise ShapeError(f"stack_rows: expected vectors of length {n}, got shape {t.shape}")
    out = np.stack([t.values for t in tensors])

    def bw(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _TAPE.record("stack_rows", tuple(tensors), out, bw)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(np.atleast_1d(a.values)).reshape(a.shape)
    return _TAPE.record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.values)
    return _TAPE.record("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _TAPE.record("relu", (a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.values.ndim == 0:
        raise ShapeError("softmax: scalar input has no axis")
    if not -a.values.ndim <= axis < a.values.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _TAPE.record("softmax", (a,), s, bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.values.ndim == 0:
        raise ShapeError("log_softmax: scalar input has no axis")
    z = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _TAPE.record("log_softmax", (a,), out, bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise DomainError("log: non-positive input")
    v = a.values
    return _TAPE.record("log", (a,), np.log(v), lambda g: (g / v,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.values)
    return _TAPE.record("exp", (a,), e, lambda g: (g * e,))


def square(a: Tensor) -> Tensor:
    v = a.values
    return _TAPE.record("square", (a,), v * v, lambda g: (2.0 * v * g,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise DomainError("sqrt: non-positive input")
    r = np.sqrt(a.values)
    return _TAPE.record("sqrt", (a,), r, lambda g: (g / (2.0 * r),))


def softplus(a: Tensor) -> Tensor:
    v = a.values
    out = np.where(v > 30.0, v, np.log1p(np.exp(np.minimum(v, 30.0))))
    s = _sigmoid(np.atleast_1d(v)).reshape(v.shape)
    return _TAPE.record("softplus", (a,), out, lambda g: (g * s,))


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup; gradient scatters back into exactly the used rows."""
    if table.values.ndim != 2:
        raise ShapeError(f"gather_rows: expected a matrix, got shape {table.shape}")
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: id out of range [0, {table.shape[0]})")
    out = table.values[ids].copy()

    def bw(g):
        acc = np.zeros_like(table.values)
        np.add.at(acc, ids, g)
        return (acc,)

    return _TAPE.record("gather_rows", (table,), out, bw)


def pick(a: Tensor, index) -> Tensor:
    """Select one entry as a 0-d scalar: vector + int, or matrix + (i, j)."""
    v = a.values
    if v.ndim == 1:
        i = int(index)
        if not 0 <= i < v.size:
            raise IndexError(f"pick: index {i} out of range for length {v.size}")
        idx = (i,)
    elif v.ndim == 2:
        i, j = index
        idx = (int(i), int(j))
        if not (0 <= idx[0] < v.shape[0] and 0 <= idx[1] < v.shape[1]):
            raise IndexError(f"pick: index {idx} out of range for shape {v.shape}")
    else:
        raise ShapeError(f"pick: expected vector or matrix, got shape {a.shape}")
    out = np.asarray(v[idx])

    def bw(g):
        acc = np.zeros_like(v)
        acc[idx] = g
        return (acc,)

    return _TAPE.record("pick", (a,), out, bw)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale a vector to unit Euclidean norm (composite op)."""
    norm = sqrt(add(tsum(square(v)), constant(eps)))
    return div(v, norm)


def cosine_similarity_rows(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between the rows of two matrices."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity_rows: shapes {a.shape} and {b.shape} do not conform")
    an = stack_rows([l2_normalize(pick_row(a, i)) for i in range(a.shape[0])])
    bn = stack_rows([l2_normalize(pick_row(b, i)) for i in range(b.shape[0])])
    return matmul(an, transpose(bn))


def pick_row(a: Tensor, i: int) -> Tensor:
    """Select row i of a matrix as a vector."""
    if a.values.ndim != 2:
        raise ShapeError(f"pick_row: expected a matrix, got shape {a.shape}")
    i = int(i)
    if not 0 <= i < a.shape[0]:
        raise IndexError(f"pick_row: row {i} out of range for shape {a.shape}")
    out = a.values[i].copy()

    def bw(g):
        acc = np.zeros_like(a.values)
        acc[i] = g
        return (acc,)

    return _TAPE.record("pick_row", (a,), out, bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f(*inputs)`` against central finite
    differences. Returns max over all input entries of
    ``|analytic - numeric| / max(1e-8, |numeric|)``.

    ``f`` must rebuild its graph on each call and be deterministic given
    the inputs (hold any RNG fixed).
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    clear_tape()
    loss = f(*inputs)
    if _TAPE.is_tracked(loss):
        backward(loss)
    # an untracked loss is constant in the inputs; analytic grads stay zero
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in inputs]

    def eval_at():
        clear_tape()
        out = f(*inputs).item()
        clear_tape()
        return out

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.values.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = eval_at()
            flat[i] = orig - eps
            down = eval_at()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, rel)
    for t in inputs:
        t.grad = None
    return worst


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction; one (m, v, t) state per parameter."""

    def __init__(self, params, lr: float = 4e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]
        self._t = 0

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError("adam step with missing grad; call backward first")
        self._t += 1
        b1t = 1.0 - self.beta1 ** self._t
        b2t = 1.0 - self.beta2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
