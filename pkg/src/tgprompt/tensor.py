"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the prompt-tuning pipeline needs are provided. Every op
records a node on the active thread-local :class:`Tape` when at least one input
requires a gradient; :func:`backward` replays the tape in reverse and clears it.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = os.environ.get("TGP_DEBUG", "") not in ("", "0")

# zero-norm inputs seen by cosine_similarity (defined as similarity 0)
zero_norm_events = 0


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array that can participate in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name
        if DEBUG and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite value in tensor {name or ''}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def swapaxes_last(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "inputs", "backward", "op", "alive")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op
        self.alive = True


class Tape:
    """Ordered record of differentiable ops (execution order is topological)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.alive = False
        self.nodes = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list[Tape]:
    st = getattr(_local, "tapes", None)
    if st is None:
        st = _local.tapes = [Tape()]
    return st


def current_tape() -> Tape:
    return _stack()[-1]


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(out, tuple(inputs), backward, op)
        out._node = node
        current_tape().record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- primitives -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


elementwise_mul = mul


def broadcast_mul(col, mat) -> Tensor:
    """Scale each row of ``mat`` (..., n, m) by the column vector ``col`` (..., n, 1)."""
    col, mat = _as_tensor(col), _as_tensor(mat)
    if col.ndim != mat.ndim or col.shape[-1] != 1 or col.shape[:-1] != mat.shape[:-1]:
        raise ShapeError(f"broadcast_mul: column {col.shape} does not match matrix {mat.shape}")
    return mul(col, mat)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(np.matmul(ad, bd), (a, b), backward, "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat(axis={axis}): shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, ts, backward, "concat")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def cos(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward, "getitem")


def mean_pool(x, mask: np.ndarray | None = None, axis: int = -2) -> Tensor:
    """Mean over ``axis`` restricted to rows where ``mask`` is true.

    ``mask`` has the shape of ``x`` without its last axis. An empty selection
    pools to the zero vector.
    """
    x = _as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=bool)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"mean_pool: mask {m.shape} does not match input {x.shape}")
    m = m[..., None]
    count = np.maximum(m.sum(axis=axis, keepdims=True), 1.0)
    weights = m / count
    out = np.sum(x.data * weights, axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return _make(out, (x,), backward, "mean_pool")


def masked_softmax(x, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis; masked-out entries get weight 0.

    Rows whose entries are all masked produce all-zero weights.
    """
    x = _as_tensor(x)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(m, x.data, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(m, np.exp(z - zmax), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    y = e / np.where(denom > 0, denom, 1.0)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "masked_softmax")


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine similarity along the last axis; zero-norm rows give 0."""
    global zero_norm_events
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt(np.sum(ad * ad, axis=-1))
    nb = np.sqrt(np.sum(bd * bd, axis=-1))
    ok = (na > 0) & (nb > 0)
    zero_norm_events += int(np.size(ok) - np.count_nonzero(ok))
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = np.sum(ad * bd, axis=-1)
    s = np.where(ok, dot / (na_s * nb_s), 0.0)

    def backward(g):
        gk = np.where(ok, g, 0.0)[..., None]
        nak, nbk, sk = na_s[..., None], nb_s[..., None], s[..., None]
        ga = gk * (bd / (nak * nbk) - sk * ad / (nak * nak))
        gb = gk * (ad / (nak * nbk) - sk * bd / (nbk * nbk))
        return ga, gb

    return _make(s, (a, b), backward, "cosine_similarity")


def l2_norm_sq(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.sum(ad * ad), (a,), lambda g: (2.0 * g * ad,), "l2_norm_sq")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_with_logits(logits, labels) -> Tensor:
    """Elementwise binary cross-entropy on logits (no reduction)."""
    x = _as_tensor(logits)
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), x.shape)
    xd = x.data
    loss = np.maximum(xd, 0.0) - xd * y + np.log1p(np.exp(-np.abs(xd)))
    return _make(loss, (x,), lambda g: (g * (_sigmoid(xd) - y),), "bce_with_logits")


def log_softmax_pairwise(a, b) -> Tensor:
    """log(e^a / (e^a + e^b)) elementwise, in log-sum-exp form."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"log_softmax_pairwise: shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad - np.logaddexp(ad, bd)

    def backward(g):
        pb = _sigmoid(bd - ad)
        return g * pb, -g * pb

    return _make(out, (a, b), backward, "log_softmax_pairwise")


def mean(a) -> Tensor:
    a = _as_tensor(a)
    return mul(tsum(a), 1.0 / max(a.data.size, 1))


# --- reverse pass -----------------------------------------------------------


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss`` recorded on the current tape.

    Gradients are accumulated into ``.grad`` of every leaf that requires one
    and returned as a ``{leaf: gradient}`` map. The tape is cleared afterwards,
    so a second call without a new forward pass raises.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise RuntimeError("backward: loss is not the output of a recorded op")
    if not node.alive:
        raise RuntimeError("backward: tape already consumed; run a new forward pass")
    tape = current_tape()

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for n in reversed(tape.nodes):
        g = grads.pop(id(n.out), None)
        if g is None:
            continue
        for inp, gi in zip(n.inputs, n.backward(g)):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._node is None:
                leaves[key] = inp
    tape.clear()

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# --- optimisation -----------------------------------------------------------


class Adam:
    """Bias-corrected Adam acting in place on leaf tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Adam) -> None:
    """Functional form: install ``grads`` on ``params`` and take one step."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("adam_step: params differ from those registered in state")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise ShapeError(f"adam_step: grad {np.shape(g)} vs param {p.shape}")
        p.grad = np.asarray(g, dtype=np.float64)
    state.step()


# --- finite-difference checking --------------------------------------------


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` with respect to ``x``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return out


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences."""
    for x in inputs:
        x.grad = None
    with Tape():
        loss = fn()
        backward(loss)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, max_rel_error(analytic, numeric_grad(fn, x, h)))
    return worst
