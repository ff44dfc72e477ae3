"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Operations record onto the innermost active :class:`Tape`. Outside a tape
they are plain numpy evaluations, which is what evaluation code relies on
for speed.

    with Tape() as tape:
        loss = mlp_forward(layers, x).sum()
    tape.backward(loss)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from scipy import special

from . import _kernels


class DimensionError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operators delegate to the module-level ops
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None):
        return tsum(self, axis)

    def mean(self, axis: int | None = None):
        return tmean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of differentiable operations.

    Each node is ``(output, inputs, backward_fn)``; inputs always precede
    the node that consumes them because recording happens at op time.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        out._node = len(self.nodes)
        self.nodes.append((out, inputs, fn))

    def backward(self, root: Tensor, params: Iterable[Tensor] = ()) -> None:
        backward(self, root, params)


def backward(tape: Tape, root: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Write d(root)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaves that the root does not depend on (and any extra ``params``) get
    zero gradients. Existing ``.grad`` buffers are overwritten.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._node is None or root._node >= len(tape.nodes) or tape.nodes[root._node][0] is not root:
        raise ValueError("root was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for p in params:
        leaves[id(p)] = p
    for out, inputs, fn in reversed(tape.nodes[: root._node + 1]):
        g = grads.pop(id(out), None)
        for t in inputs:
            if t.requires_grad and t._node is None:
                leaves[id(t)] = t
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
    for k, leaf in leaves.items():
        g = grads.get(k)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.grad = None
        out.requires_grad = True
        out.name = None
        out._node = None
        _ACTIVE[-1].record(out, inputs, fn)
        return out
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._node = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- elementwise nonlinearities ------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


LEAKY_SLOPE = 0.01


def leaky_relu(a) -> Tensor:
    a = as_tensor(a)
    slope = np.where(a.data > 0, 1.0, LEAKY_SLOPE)
    return _make(a.data * slope, (a,), lambda g: (g * slope,))


def np_softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow for large |x|
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def np_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np_softplus(ad), (a,), lambda g: (g * np_sigmoid(ad),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def np_log_softplus(x: np.ndarray) -> np.ndarray:
    # below -30, softplus(x) equals e^x to double precision, so log is x
    x = np.asarray(x, dtype=np.float64)
    small = x < -30.0
    return np.where(small, x, np.log(np_softplus(np.where(small, 0.0, x))))


def log_softplus(a) -> Tensor:
    """log(softplus(a)) with slope -> 1 (not 0) as a -> -inf."""
    a = as_tensor(a)
    ad = a.data

    def back(g):
        small = ad < -30.0
        slope = np_sigmoid(ad) / np_softplus(np.where(small, 0.0, ad))
        return (g * np.where(small, 1.0, slope),)

    return _make(np_log_softplus(ad), (a,), back)


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(-np_softplus(-ad), (a,), lambda g: (g * np_sigmoid(-ad),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,))


def power(a, b) -> Tensor:
    """a ** b for positive ``a``; differentiable in both arguments."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad ** bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd * ad ** (bd - 1.0), ad.shape), _unbroadcast(g * out * np.log(ad), bd.shape)),
    )


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(special.gammaln(ad), (a,), lambda g: (g * special.digamma(ad),))


def identity(a) -> Tensor:
    return as_tensor(a)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "leaky-relu": leaky_relu,
    "softplus": softplus,
    "identity": identity,
}


# -- reductions and reshaping ---------------------------------------------------


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _make(out, parts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def columns(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop], (a,), fn)


def take_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]``; gradients scatter-add back."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), fn)


def segment_mean(a, seg, n_seg: int) -> Tensor:
    """Mean of the rows of ``a`` within each of ``n_seg`` groups.

    Accumulation is compensated, so the result does not depend on row order
    beyond the last few ulps.
    """
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_seg).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("every segment needs at least one row")
    out = _kernels.segment_sum(a.data, seg, n_seg) / counts[:, None]
    return _make(out, (a,), lambda g: ((g / counts[:, None])[seg],))


# -- networks -------------------------------------------------------------------


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: str = "identity"


def mlp_forward(layers: Sequence[Layer], x) -> Tensor:
    """Apply ``act(h @ W + b)`` layer by layer."""
    h = as_tensor(x)
    for i, layer in enumerate(layers):
        w, b = layer.weight, layer.bias
        if h.ndim != 2 or w.ndim != 2 or h.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise DimensionError(
                f"layer {i}: input {h.shape}, weight {w.shape}, bias {b.shape} do not chain"
            )
        if layer.activation not in ACTIVATIONS:
            raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
        h = ACTIVATIONS[layer.activation](add(matmul(h, w), b))
    return h


def init_mlp(
    rng: np.random.Generator,
    sizes: Sequence[int],
    hidden_activation: str = "relu",
    out_activation: str = "identity",
    prefix: str = "",
) -> list[Layer]:
    """He-uniform weights, zero biases."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / n_in)
        w = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True, name=f"{prefix}{i}.weight")
        b = Tensor(np.zeros(n_out), requires_grad=True, name=f"{prefix}{i}.bias")
        act = out_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(Layer(w, b, act))
    return layers


def layer_params(layers: Sequence[Layer]) -> list[Tensor]:
    out = []
    for layer in layers:
        out.extend((layer.weight, layer.bias))
    return out


# -- optimisation ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"gradient of {name!r} has {bad} non-finite entries")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient of {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam over a named group of tensors; steps from their ``.grad``."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, **kw):
        self.params = params
        self.state = AdamState(lr=lr, **kw)

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        adam_step(self.state, arrays, grads)


# -- gradient checking --------------------------------------------------------------


class GradCheck(NamedTuple):
    max_rel_error: float
    n_checked: int
    excluded: list[tuple[str, int]]


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    kink_tol: float = 1e-3,
) -> GradCheck:
    """Compare tape gradients against central differences.

    Coordinates where the one-sided slopes disagree by more than
    ``kink_tol`` (relative) sit on a nondifferentiable point and are
    reported in ``excluded`` rather than counted.
    """
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss, params.values())
    analytic = {k: p.grad.copy() for k, p in params.items()}

    worst = 0.0
    checked = 0
    excluded = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            f0 = loss_fn().item()
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            sp, sm = (fp - f0) / h, (f0 - fm) / h
            if abs(sp - sm) > kink_tol * max(1.0, abs(sp), abs(sm)):
                excluded.append((name, i))
                continue
            numeric = (fp - fm) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / (abs(numeric) + 1e-8))
            checked += 1
    return GradCheck(worst, checked, excluded)
