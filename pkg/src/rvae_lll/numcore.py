"""Reverse-mode autodiff over dense numpy arrays, plus AdamW.

Graphs are built per step (define-by-run). Every op whose inputs require
gradients appends a node to the active :class:`Graph`; creation order is a
valid topological order, so backward simply walks the tape in reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


_GRAPH_STACK: list["Graph"] = []


def _active() -> "Graph | None":
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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
        if isinstance(other, Tensor) and other.requires_grad:
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / _raw(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the tensor operand's dtype so f32 graphs stay f32
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]
    op: str


class Graph:
    """Tape of operation records for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _GRAPH_STACK.remove(self)

    def record(self, out: Tensor, parents, backward, op: str) -> None:
        self.nodes.append(_Node(out, tuple(parents), backward, op))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # whatever remains belongs to leaves
        for node in self.nodes:
            for p in node.parents:
                g = grads.pop(id(p), None)
                if g is not None:
                    p.grad = g if p.grad is None else p.grad + g
        if id(loss) in grads and loss.requires_grad:
            loss.grad = grads.pop(id(loss))

    def reset(self) -> None:
        self.nodes.clear()


def _make(data, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    graph = _active()
    needs = graph is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        graph.record(out, parents, backward, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {np.shape(a)} and {np.shape(b)}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); the gradient flows only where x > floor."""
    above = x.data > floor
    return _make(np.where(above, x.data, floor).astype(x.dtype), (x,), lambda g: (g * above,), "maximum")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = x2 * 0.044715
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= xd
    y *= 0.5

    def back(g):
        dinner = x2 * (3 * 0.044715 * _GELU_C)
        dinner += _GELU_C
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        sech2 *= xd
        sech2 *= dinner
        sech2 += t
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return _make(y, (x,), back, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(y, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), back, "getitem")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    try:
        y = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from None
    splits = np.cumsum(sizes)[:-1]
    return _make(y, xs, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1 or ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    try:
        y = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}") from None

    def back(g):
        # promote 1-D operands to matrices so one rule covers every case
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if bd.ndim == 1:
            g2 = g2[..., None]
        if ad.ndim == 1:
            g2 = g2[..., None, :]
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga[..., 0, :]
        if bd.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(y, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is [in, out]."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {xd.shape} and {wd.shape}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    y = x2 @ wd
    if b is not None:
        y = y + b.data
    y = y.reshape(*lead, wd.shape[1])

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, back, "linear")


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    xd = x.data
    n = xd.shape[-1]
    # sum * (1/n) instead of .mean(): same value, far less per-call overhead
    scale = 1.0 / n
    xc = xd - xd.sum(axis=-1, keepdims=True) * scale
    var = (xc * xc).sum(axis=-1, keepdims=True) * scale
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data

    def back(g):
        gh = g * gain.data if gain is not None else g
        gx = inv * (gh - gh.sum(axis=-1, keepdims=True) * scale - xhat * ((gh * xhat).sum(axis=-1, keepdims=True) * scale))
        out = [gx]
        if gain is not None:
            out.append((g * xhat).reshape(-1, n).sum(axis=0))
        if bias is not None:
            out.append(g.reshape(-1, n).sum(axis=0))
        return tuple(out)

    parents = [x] + [p for p in (gain, bias) if p is not None]
    return _make(y, parents, back, "layernorm")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    wshape, dtype = weight.shape, weight.dtype

    def back(g):
        flat = ids.reshape(-1)
        g2 = g.reshape(-1, wshape[1])
        # scatter-add as a one-hot product; much faster than np.add.at
        onehot = np.zeros((flat.size, wshape[0]), dtype=dtype)
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g2,)

    return _make(weight.data[ids], (weight,), back, "embedding")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable, bool) marks allowed entries."""
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), back, "softmax")


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over positions where ``mask`` is set."""
    ld = logits.data
    targets = np.asarray(targets)
    if targets.shape != ld.shape[:-1]:
        raise ShapeError(f"cross_entropy: logits {ld.shape} do not match targets {targets.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: loss mask selects no positions")
    lsm = log_softmax_np(ld)
    picked = np.take_along_axis(lsm, targets[..., None], axis=-1)[..., 0]
    value = -(picked * mask).sum() / count

    def back(g):
        p = np.exp(lsm)
        onehot_sub = p
        np.put_along_axis(onehot_sub, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, axis=-1)
        return (onehot_sub * (mask[..., None] * (g / count)),)

    return _make(np.asarray(value, dtype=ld.dtype), (logits,), back, "cross_entropy")


def weighted_nll(logits: Tensor, targets: np.ndarray, weights: np.ndarray, return_positions: bool = False):
    """``sum(weights * -log softmax(logits)[target])``; zero weights drop positions.

    With ``return_positions`` the per-position NLL array is returned as well.
    """
    ld = logits.data
    targets = np.asarray(targets)
    if targets.shape != ld.shape[:-1] or np.shape(weights) != targets.shape:
        raise ShapeError(f"weighted_nll: logits {ld.shape}, targets {targets.shape}, weights {np.shape(weights)}")
    lsm = log_softmax_np(ld)
    picked = np.take_along_axis(lsm, targets[..., None], axis=-1)[..., 0]
    value = -(picked * weights).sum()
    nll_positions = -picked

    def back(g):
        grad = np.exp(lsm)
        idx = targets[..., None]
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, -1) - 1.0, axis=-1)
        grad *= weights[..., None] * g
        return (grad,)

    out = _make(np.asarray(value, dtype=ld.dtype), (logits,), back, "weighted_nll")
    if return_positions:
        return out, nll_positions
    return out


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def forward_eval(fn: Callable[..., object], inputs: Mapping[str, object]) -> tuple[object, Graph]:
    """Run ``fn(**inputs)`` under a fresh tape; returns (outputs, graph)."""
    graph = Graph()
    with graph:
        out = fn(**inputs)
    return out, graph


def backward_grad(graph: Graph, loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    graph.backward(loss)
    if params is None:
        return {}
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


@dataclass
class FiniteDiffReport:
    max_rel_error: dict[str, float]
    tolerance: float
    floor: float = 1e-6

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def rel_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> FiniteDiffReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must rebuild the loss from ``params`` on every call. When
    ``coords_per_param`` is set, only that many random coordinates of each
    tensor are probed. ``analytic`` overrides the tape gradients (used for
    negative controls).
    """
    if analytic is None:
        for p in params.values():
            p.grad = None
        graph = Graph()
        with graph:
            loss = loss_fn()
        graph.backward(loss)
        analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    rng = rng or np.random.default_rng(0)
    # A central difference carries roundoff of a few ulp of the loss divided
    # by 2*step; gradients below noise / tolerance cannot be resolved, so they
    # set the floor of the relative-error denominator.
    base = loss_fn().data
    noise = 4.0 * np.finfo(base.dtype).eps * abs(float(base)) / (2.0 * step)
    floor = max(1e-6, noise / tolerance)
    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            idxs = rng.choice(flat.size, size=coords_per_param, replace=False)
        worst = 0.0
        ga = np.asarray(analytic[name]).reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            num = (up - down) / (2 * step)
            worst = max(worst, rel_error(float(ga[i]), num, floor))
        report[name] = worst
    return FiniteDiffReport(report, tolerance, floor)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter update counts; frozen groups keep their own bias correction
    t: dict[str, int] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    trainable: Iterable[str] | None = None,
) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Parameters outside ``trainable`` are left untouched, moments included.
    """
    names = list(params) if trainable is None else [n for n in params if n in set(trainable)]
    for name in names:
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name in names:
        g = grads.get(name)
        if g is None:
            continue
        p = params[name].data
        if p.shape != g.shape:
            raise ShapeError(f"adamw: parameter {name!r} has shape {p.shape} but gradient {g.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        t = state.t.get(name, 0) + 1
        state.t[name] = t
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def normal_init(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)
