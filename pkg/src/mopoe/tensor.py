"""Dense float64 tensors with taped reverse-mode differentiation.

A small define-by-run engine sized for MLP encoders/decoders and ELBO
graphs at desk scale. Forward values follow 64-bit float semantics and
are deterministic; gradients are exact analytic partials, checked
against finite differences in the test suite.

The op set is fixed: add, sub, mul, div, matmul, exp, log, softplus,
tanh, negate, sum, mean, logsumexp, broadcast, reshape, concat, slice,
sigmoid, square, clamp. Broadcasting is numpy-style but intentionally
narrow: only leading axes and size-1 axes may expand; anything else
needs an explicit reshape.

A tape is single-threaded and rebuilt per forward pass. Tensors that are
not attached to an active tape are plain immutable values.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "OptimizerState",
    "ShapeMismatch",
    "DomainError",
    "NonScalarRoot",
    "MissingGradient",
    "tape_active",
    "forward_op",
    "backward",
    "param_gradients",
    "optimizer_step",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "log",
    "softplus",
    "tanh",
    "sigmoid",
    "negate",
    "square",
    "clamp",
    "tensor_sum",
    "tensor_mean",
    "logsumexp",
    "broadcast_to",
    "reshape",
    "concat",
    "tensor_slice",
]

# Largest x with exp(x) finite in float64; exp clamps here instead of
# overflowing to inf.
_EXP_MAX = 709.0


class ShapeMismatch(ValueError):
    """Operand shapes are not compatible for the requested op."""


class DomainError(ValueError):
    """Input outside the op's domain (log of nonpositive, div by zero, overflow)."""


class NonScalarRoot(ValueError):
    """backward() requires a scalar-shaped root tensor."""


class MissingGradient(KeyError):
    """Optimizer step received no gradient for a parameter."""


class Tensor:
    """A dense float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        # np.ascontiguousarray would promote 0-d to 1-d; keep scalars 0-d
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.array(arr, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all graph building funnels through the op functions
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return tensor_slice(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of one forward pass.

    Node ids are assigned in creation order, so every node's inputs have
    strictly smaller ids and a single reverse sweep visits each node
    exactly once.
    """

    def __init__(self):
        # per node: (op kind, input node ids, backward closure or None for leaves)
        self.nodes: list[tuple[str, tuple[int, ...], object]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def _register_leaf(self, t: Tensor) -> int:
        self.nodes.append(("leaf", (), None))
        nid = len(self.nodes) - 1
        t.node_id = nid
        t._tape = self
        return nid

    def _record(self, kind: str, inputs: tuple[Tensor, ...], out: Tensor, backward_fn) -> None:
        ids = []
        for x in inputs:
            if x.requires_grad or (x._tape is self and x.node_id is not None):
                if x._tape is not self:
                    self._register_leaf(x)
                ids.append(x.node_id)
            else:
                ids.append(-1)
        self.nodes.append((kind, tuple(ids), backward_fn))
        out.node_id = len(self.nodes) - 1
        out._tape = self
        out.requires_grad = True


_ACTIVE_TAPE: Tape | None = None


def tape_active() -> Tape | None:
    return _ACTIVE_TAPE


def _traced(*inputs: Tensor) -> bool:
    if _ACTIVE_TAPE is None:
        return False
    t = _ACTIVE_TAPE
    return any(x.requires_grad or x._tape is t and x.node_id is not None for x in inputs)


def _ensure_finite(kind: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{kind}: non-finite result (overflow?)")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shapes(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _binary(kind: str, a: Tensor, b: Tensor, fwd, bwd_a, bwd_b) -> Tensor:
    _broadcast_shapes(kind, a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = Tensor(_ensure_finite(kind, fwd(a.data, b.data)))
    if _traced(a, b):
        a_shape, b_shape = a.shape, b.shape

        def backward_fn(g, acc, ids):
            if ids[0] >= 0:
                acc(ids[0], _unbroadcast(bwd_a(g), a_shape))
            if ids[1] >= 0:
                acc(ids[1], _unbroadcast(bwd_b(g), b_shape))

        _ACTIVE_TAPE._record(kind, (a, b), out, backward_fn)
    return out


def _unary(kind: str, x: Tensor, fwd_value: np.ndarray, bwd) -> Tensor:
    out = Tensor(fwd_value)
    if _traced(x):

        def backward_fn(g, acc, ids):
            if ids[0] >= 0:
                acc(ids[0], bwd(g))

        _ACTIVE_TAPE._record(kind, (x,), out, backward_fn)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _binary("mul", a, b, lambda x, y: x * y, lambda g: g * bd, lambda g: g * ad)


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g: g / bd,
        lambda g: -g * ad / (bd * bd),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul: needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = Tensor(_ensure_finite("matmul", a.data @ b.data))
    if _traced(a, b):
        ad, bd = a.data, b.data

        def backward_fn(g, acc, ids):
            if ids[0] >= 0:
                acc(ids[0], g @ bd.T)
            if ids[1] >= 0:
                acc(ids[1], ad.T @ g)

        _ACTIVE_TAPE._record("matmul", (a, b), out, backward_fn)
    return out


def exp(x: Tensor) -> Tensor:
    # clamp instead of overflowing; gradient is zero in the clamped region
    clipped = np.minimum(x.data, _EXP_MAX)
    val = np.exp(clipped)
    inside = x.data <= _EXP_MAX
    return _unary("exp", x, val, lambda g: g * val * inside)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log: nonpositive input")
    xd = x.data
    return _unary("log", x, np.log(xd), lambda g: g / xd)


def softplus(x: Tensor) -> Tensor:
    # max(x, 0) + log1p(exp(-|x|)): exact and overflow-safe on both tails
    xd = x.data
    val = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    sig = _stable_sigmoid(xd)
    return _unary("softplus", x, val, lambda g: g * sig)


def _stable_sigmoid(xd: np.ndarray) -> np.ndarray:
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    val = _stable_sigmoid(x.data)
    return _unary("sigmoid", x, val, lambda g: g * val * (1.0 - val))


def tanh(x: Tensor) -> Tensor:
    val = np.tanh(x.data)
    return _unary("tanh", x, val, lambda g: g * (1.0 - val * val))


def negate(x: Tensor) -> Tensor:
    return _unary("negate", x, -x.data, lambda g: -g)


def square(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(over="ignore", invalid="ignore"):
        val = _ensure_finite("square", xd * xd)
    return _unary("square", x, val, lambda g: 2.0 * xd * g)


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Componentwise clip; gradient passes through inside [lo, hi]."""
    xd = x.data
    val = np.clip(xd, lo, hi)
    mask = np.ones_like(xd)
    if lo is not None:
        mask = mask * (xd >= lo)
    if hi is not None:
        mask = mask * (xd <= hi)
    return _unary("clamp", x, val, lambda g: g * mask)


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    xd = x.data
    val = xd.sum(axis=axis)
    shape = xd.shape

    def bwd(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _unary("sum", x, val, bwd)


def tensor_mean(x: Tensor, axis: int | None = None) -> Tensor:
    xd = x.data
    val = xd.mean(axis=axis)
    shape = xd.shape
    n = xd.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return np.broadcast_to(g / n, shape).copy()
        return np.broadcast_to(np.expand_dims(g / n, axis), shape).copy()

    return _unary("mean", x, val, bwd)


def logsumexp(x: Tensor, axis: int = 0) -> Tensor:
    """Shifted logsumexp along one axis; exact for constant slices."""
    xd = x.data
    if xd.ndim == 0:
        raise ShapeMismatch("logsumexp: needs at least 1-D input")
    m = np.max(xd, axis=axis, keepdims=True)
    shifted = np.exp(xd - m)
    total = shifted.sum(axis=axis, keepdims=True)
    val = np.squeeze(m + np.log(total), axis=axis)
    softmax = shifted / total

    def bwd(g):
        return np.expand_dims(g, axis) * softmax

    return _unary("logsumexp", x, val, bwd)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        val = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeMismatch(f"broadcast: {x.shape} -> {shape}") from None
    orig = x.shape
    return _unary("broadcast", x, val, lambda g: _unbroadcast(g, orig))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        val = x.data.reshape(shape).copy()
    except ValueError:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}") from None
    orig = x.shape
    return _unary("reshape", x, val, lambda g: g.reshape(orig))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat: empty input list")
    datas = [t.data for t in tensors]
    try:
        val = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: shapes {[t.shape for t in tensors]}") from None
    out = Tensor(val)
    if _traced(*tensors):
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)

        def backward_fn(g, acc, ids):
            for i, nid in enumerate(ids):
                if nid >= 0:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(offsets[i], offsets[i + 1])
                    acc(nid, g[tuple(sl)])

        _ACTIVE_TAPE._record("concat", tuple(tensors), out, backward_fn)
    return out


def tensor_slice(x: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); scatter-adds the gradient back."""
    out = Tensor(np.array(x.data[key], dtype=np.float64))
    if _traced(x):
        shape = x.shape

        def backward_fn(g, acc, ids):
            if ids[0] >= 0:
                full = np.zeros(shape)
                full[key] = g
                acc(ids[0], full)

        _ACTIVE_TAPE._record("slice", (x,), out, backward_fn)
    return out


_OP_TABLE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "negate": negate,
    "square": square,
    "clamp": clamp,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "logsumexp": logsumexp,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "concat": concat,
    "slice": tensor_slice,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one forward op by kind name."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar root; returns node_id -> gradient array.

    Visits each tape node exactly once, in reverse id order. The map
    contains an entry for every node the root actually depends on;
    use the leaf tensors' node_id to look up parameter gradients.
    """
    if root.size != 1:
        raise NonScalarRoot(f"backward root must be scalar-shaped, got {root.shape}")
    if root._tape is not tape or root.node_id is None:
        raise ValueError("root tensor was not recorded on this tape")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[root.node_id] = np.ones_like(root.data)

    def acc(nid: int, g: np.ndarray) -> None:
        if grads[nid] is None:
            grads[nid] = np.array(g, dtype=np.float64, copy=True)
        else:
            grads[nid] = grads[nid] + g

    for nid in range(root.node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        kind, ids, backward_fn = tape.nodes[nid]
        if backward_fn is not None:
            backward_fn(g, acc, ids)
    return {i: g for i, g in enumerate(grads) if g is not None}


def param_gradients(
    tape: Tape, grads: dict[int, np.ndarray], params: list[Tensor]
) -> dict[int, np.ndarray]:
    """Extend a backward() result to cover every parameter.

    Parameters the root never reached get explicit zero gradients (and a
    tape registration if they were never touched), so optimizer_step's
    coverage precondition holds.
    """
    out = dict(grads)
    for p in params:
        if p._tape is not tape or p.node_id is None:
            tape._register_leaf(p)
        if p.node_id not in out:
            out[p.node_id] = np.zeros(p.shape)
    return out


class OptimizerState:
    """First-order optimizer state: plain SGD or bias-corrected Adam."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, kind: str, learning_rate: float):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        self.kind = kind
        self.learning_rate = float(learning_rate)
        self.step_count = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def _init_buffers(self, params: list[Tensor]) -> None:
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def optimizer_step(
    state: OptimizerState,
    params: list[Tensor],
    grads: dict[int, np.ndarray],
) -> None:
    """Apply one update in place; params are looked up by tape node id."""
    gs = []
    for p in params:
        if p.node_id is None or p.node_id not in grads:
            raise MissingGradient(f"no gradient for parameter with shape {p.shape}")
        g = grads[p.node_id]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param shape {p.shape}")
        gs.append(g)

    if state.kind == "sgd":
        for p, g in zip(params, gs):
            p.data = p.data - state.learning_rate * g
        state.step_count += 1
        return

    if state.m is None:
        state._init_buffers(params)
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.BETA1, state.BETA2, state.EPS
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, gs)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
