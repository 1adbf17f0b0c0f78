"""Dense float64 kernels and a small tape-based reverse-mode differentiator.

Every op in this module accepts either plain ``numpy.ndarray`` values or
:class:`Var` handles recorded on a :class:`Tape`. With plain arrays the op is
evaluated directly; as soon as one argument is a ``Var`` the result is
recorded so that :func:`reverse_grad` can propagate gradients back to any
slot on the tape, intermediate activations included.

The op set is deliberately closed: it covers what the transformer forward
pass, the task metrics and the gate parameterisation need, nothing more.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UnknownSlotError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite entries in {what}")
    return x


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Entry:
    fwd: Callable | None
    bwd: Callable | None
    args: tuple  # (is_slot, slot index or constant) pairs
    value: np.ndarray
    name: str


class Tape:
    """Ordered record of primitive ops applied during one forward computation."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __len__(self):
        return len(self.entries)

    def leaf(self, value, name: str = "leaf") -> "Var":
        value = as_tensor(value)
        self.entries.append(_Entry(None, None, (), value, name))
        return Var(self, len(self.entries) - 1)

    def _record(self, fwd, bwd, args, value, name) -> "Var":
        self.entries.append(_Entry(fwd, bwd, args, value, name))
        return Var(self, len(self.entries) - 1)

    def replay(self) -> list[np.ndarray]:
        """Recompute every entry from the leaf values, in recorded order."""
        values: list[np.ndarray] = []
        for e in self.entries:
            if e.fwd is None:
                values.append(e.value)
                continue
            ins = [values[a] if is_slot else a for is_slot, a in e.args]
            values.append(e.fwd(*ins))
        return values


class Var:
    """Handle to one value slot on a tape."""

    __slots__ = ("tape", "slot")
    __array_priority__ = 1000  # make ndarray <op> Var dispatch to Var

    def __init__(self, tape: Tape, slot: int):
        self.tape = tape
        self.slot = slot

    @property
    def value(self) -> np.ndarray:
        return self.tape.entries[self.slot].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(slot={self.slot}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __matmul__(self, o):
        return contract(self, o)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _apply(name: str, fwd: Callable, bwd: Callable, *args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise UnknownSlotError("operands recorded on different tapes")
            tape = a.tape
    vals = [value_of(a) for a in args]
    out = fwd(*vals)
    if tape is None:
        return out
    packed = tuple((True, a.slot) if isinstance(a, Var) else (False, a) for a in args)
    return tape._record(fwd, bwd, packed, out, name)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _shape(x):
    return np.shape(x)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    return _apply("add", np.add, lambda g, o, x, y: (_unbroadcast(g, _shape(x)), _unbroadcast(g, _shape(y))), a, b)


def sub(a, b):
    return _apply("sub", np.subtract, lambda g, o, x, y: (_unbroadcast(g, _shape(x)), _unbroadcast(-g, _shape(y))), a, b)


def mul(a, b):
    return _apply(
        "mul",
        np.multiply,
        lambda g, o, x, y: (_unbroadcast(g * y, _shape(x)), _unbroadcast(g * x, _shape(y))),
        a,
        b,
    )


def div(a, b):
    return _apply(
        "div",
        np.divide,
        lambda g, o, x, y: (_unbroadcast(g / y, _shape(x)), _unbroadcast(-g * x / (y * y), _shape(y))),
        a,
        b,
    )


def neg(a):
    return _apply("neg", np.negative, lambda g, o, x: (-g,), a)


def power(a, p: float):
    return _apply("pow", lambda x: np.power(x, p), lambda g, o, x: (g * p * np.power(x, p - 1),), a)


def exp(a):
    return _apply("exp", np.exp, lambda g, o, x: (g * o,), a)


def log(a):
    return _apply("log", np.log, lambda g, o, x: (g / x,), a)


def tanh(a):
    return _apply("tanh", np.tanh, lambda g, o, x: (g * (1.0 - o * o),), a)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    return _apply("sigmoid", _sigmoid, lambda g, o, x: (g * o * (1.0 - o),), a)


def relu(a):
    return _apply("relu", lambda x: np.maximum(x, 0.0), lambda g, o, x: (g * (x > 0),), a)


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _gelu_grad(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def gelu(a):
    """GELU, tanh approximation."""
    return _apply("gelu", _gelu, lambda g, o, x: (g * _gelu_grad(x),), a)


def identity(a):
    return a


ACTIVATIONS = {"relu": relu, "gelu": gelu, "identity": identity}


def clip(a, lo: float, hi: float):
    return _apply(
        "clip",
        lambda x: np.clip(x, lo, hi),
        lambda g, o, x: (g * ((x > lo) & (x < hi)),),
        a,
    )


def where(mask: np.ndarray, a, fill: float):
    """``a`` where ``mask`` holds, the constant ``fill`` elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    return _apply(
        "where",
        lambda x: np.where(mask, x, fill),
        lambda g, o, x: (_unbroadcast(np.where(mask, g, 0.0), _shape(x)),),
        a,
    )


def stop_gradient(a):
    return value_of(a)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _expand_grad(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) else np.full(shape, g)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


def sum_(a, axis=None, keepdims=False):
    return _apply(
        "sum",
        lambda x: np.sum(x, axis=axis, keepdims=keepdims),
        lambda g, o, x: (_expand_grad(g, x.shape, axis, keepdims),),
        a,
    )


def mean(a, axis=None, keepdims=False):
    def bwd(g, o, x):
        n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
        return (_expand_grad(g, x.shape, axis, keepdims) / n,)

    return _apply("mean", lambda x: np.mean(x, axis=axis, keepdims=keepdims), bwd, a)


def reshape(a, shape):
    return _apply("reshape", lambda x: np.reshape(x, shape), lambda g, o, x: (np.reshape(g, x.shape),), a)


def transpose(a, axes):
    inv = np.argsort(axes)
    return _apply("transpose", lambda x: np.transpose(x, axes), lambda g, o, x: (np.transpose(g, inv),), a)


def getitem(a, idx):
    def bwd(g, o, x):
        out = np.zeros_like(x)
        np.add.at(out, idx, g)
        return (out,)

    return _apply("getitem", lambda x: x[idx], bwd, a)


def take_rows(table, ids: np.ndarray):
    """Gather rows of a 2-D table, e.g. an embedding lookup."""
    ids = np.asarray(ids)

    def bwd(g, o, w):
        out = np.zeros_like(w)
        np.add.at(out, ids, g)
        return (out,)

    return _apply("take_rows", lambda w: w[ids], bwd, table)


def stack(items: Sequence, axis: int = 0):
    items = list(items)
    if not any(isinstance(x, Var) for x in items):
        return np.stack(items, axis=axis)

    def fwd(*xs):
        return np.stack(xs, axis=axis)

    def bwd(g, o, *xs):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _apply("stack", fwd, bwd, *items)


def _einsum2(sa: str, sb: str, so: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Two-operand contraction routed through batched ``matmul``."""
    if len(set(sa)) != len(sa) or len(set(sb)) != len(sb) or any(c not in sa + sb for c in so):
        return np.einsum(f"{sa},{sb}->{so}", a, b)
    drop_a = [i for i, c in enumerate(sa) if c not in sb and c not in so]
    if drop_a:
        a = a.sum(axis=tuple(drop_a))
        sa = "".join(c for i, c in enumerate(sa) if i not in drop_a)
    drop_b = [i for i, c in enumerate(sb) if c not in sa and c not in so]
    if drop_b:
        b = b.sum(axis=tuple(drop_b))
        sb = "".join(c for i, c in enumerate(sb) if i not in drop_b)
    batch = [c for c in so if c in sa and c in sb]
    contr = [c for c in sa if c in sb and c not in so]
    afree = [c for c in sa if c not in sb]
    bfree = [c for c in sb if c not in sa]
    dims = {c: n for c, n in zip(sa, a.shape)}
    dims.update({c: n for c, n in zip(sb, b.shape)})
    size = lambda cs: int(np.prod([dims[c] for c in cs], dtype=np.int64))
    at = np.transpose(a, [sa.index(c) for c in batch + afree + contr]).reshape(size(batch), size(afree), size(contr))
    bt = np.transpose(b, [sb.index(c) for c in batch + contr + bfree]).reshape(size(batch), size(contr), size(bfree))
    r = np.matmul(at, bt).reshape([dims[c] for c in batch + afree + bfree])
    order = batch + afree + bfree
    return np.transpose(r, [order.index(c) for c in so])


def _einsum(spec: str, *xs) -> np.ndarray:
    lhs, out = spec.split("->")
    subs = lhs.split(",")
    if len(xs) == 2:
        return _einsum2(subs[0], subs[1], out, np.asarray(xs[0]), np.asarray(xs[1]))
    return np.einsum(spec, *xs, optimize=True)


def einsum(subscripts: str, *operands):
    """Einsum with an explicit ``->`` output; gradients by re-contraction."""
    if "->" not in subscripts:
        raise DimensionError("einsum needs an explicit output specification")
    subscripts = subscripts.replace(" ", "")
    lhs, out_sub = subscripts.split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise DimensionError("einsum operand count mismatch")

    def fwd(*xs):
        return _einsum(subscripts, *xs)

    def bwd(g, o, *xs):
        grads = []
        for i, x in enumerate(xs):
            others = [s for j, s in enumerate(in_subs) if j != i]
            other_vals = [xs[j] for j in range(len(xs)) if j != i]
            spec = ",".join([out_sub] + others) + "->" + in_subs[i]
            grads.append(_einsum(spec, g, *other_vals))
        return tuple(grads)

    return _apply("einsum", fwd, bwd, *operands)


# ---------------------------------------------------------------------------
# composites


def log_softmax(a, axis: int = -1):
    shift = np.max(value_of(a), axis=axis, keepdims=True)
    z = a - shift
    return z - log(sum_(exp(z), axis=axis, keepdims=True))


def softmax(a, axis: int = -1):
    shift = np.max(value_of(a), axis=axis, keepdims=True)
    e = exp(a - shift)
    return e / sum_(e, axis=axis, keepdims=True)


def layer_norm(x, w, b, eps: float = 1e-5):
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc * power(var + eps, -0.5) * w + b


# ---------------------------------------------------------------------------
# public kernels


def contract(a, b, mode: str = "matmul"):
    """Row-major matrix product (``mode="matmul"``) or batched product.

    Batched mode multiplies the trailing two axes and requires identical
    leading (batch) extents.
    """
    sa, sb = _shape(a), _shape(b)
    if mode == "matmul":
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise DimensionError(f"cannot contract {sa} with {sb}")
        with np.errstate(over="ignore", invalid="ignore"):
            out = einsum("ij,jk->ik", a, b)
    elif mode == "batched-matmul":
        if len(sa) != 3 or len(sb) != 3 or sa[0] != sb[0] or sa[2] != sb[1]:
            raise DimensionError(f"cannot batch-contract {sa} with {sb}")
        with np.errstate(over="ignore", invalid="ignore"):
            out = einsum("bij,bjk->bik", a, b)
    else:
        raise DimensionError(f"unknown contraction mode {mode!r}")
    check_finite(value_of(out), "contract output")
    return out


def softmax_logprobs(logits):
    """Log-probabilities along the trailing axis, via max subtraction."""
    v = value_of(logits)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    check_finite(np.asarray(v), "logits")
    return log_softmax(logits if isinstance(logits, Var) else as_tensor(logits), axis=-1)


def reverse_grad(tape: Tape, output: Var, wrt: Sequence[Var] | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode gradients of a scalar ``output``.

    Returns a mapping ``slot -> gradient``. ``wrt`` may name any slot on the
    tape (leaves or intermediates); by default every leaf is returned.
    Slots that do not influence the output get zero gradients.
    """
    if not isinstance(output, Var) or output.tape is not tape:
        raise UnknownSlotError("output is not recorded on this tape")
    if output.value.size != 1:
        raise DimensionError(f"output must be scalar, got shape {output.shape}")
    if wrt is None:
        targets = [i for i, e in enumerate(tape.entries) if e.fwd is None]
    else:
        targets = []
        for w in wrt:
            if not isinstance(w, Var) or w.tape is not tape or not 0 <= w.slot < len(tape.entries):
                raise UnknownSlotError(f"{w!r} is not a slot on this tape")
            targets.append(w.slot)

    entries = tape.entries
    grads: list[Any] = [None] * (output.slot + 1)
    grads[output.slot] = np.ones_like(output.value)
    for i in range(output.slot, -1, -1):
        g = grads[i]
        e = entries[i]
        if g is None or e.fwd is None:
            continue
        ins = [entries[a].value if is_slot else a for is_slot, a in e.args]
        in_grads = e.bwd(g, e.value, *ins)
        for (is_slot, a), ig in zip(e.args, in_grads):
            if not is_slot or ig is None:
                continue
            grads[a] = ig if grads[a] is None else grads[a] + ig

    out = {}
    for s in targets:
        g = grads[s] if s < len(grads) else None
        out[s] = np.zeros_like(entries[s].value) if g is None else g
    return out


def grad(f: Callable[..., Var], *args) -> tuple:
    """Convenience wrapper: gradients of scalar ``f(*vars)`` w.r.t. each argument."""
    tape = Tape()
    leaves = [tape.leaf(a) for a in args]
    out = f(*leaves)
    g = reverse_grad(tape, out, leaves)
    return tuple(g[v.slot] for v in leaves)


def finite_diff_oracle(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    if not h > 0:
        raise NumericError("step must be positive")
    x = as_tensor(x).copy()
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = as_tensor(a), as_tensor(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))
