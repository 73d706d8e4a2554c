"""Small dense-tensor engine with reverse-mode autodiff on top of numpy.

Tensors wrap a numpy array and record the operation that produced them when
any input requires a gradient. ``Tensor.backward`` walks the recorded graph in
reverse topological order. Only the operations the DoCo model needs are
provided; composite ops with a cheap closed-form backward (layer norm,
softmax, l2 normalization, log-sum-exp) are single graph nodes.

The module also holds the parameter container, AdamW with a warmup + cosine
schedule, and a central-difference gradient checker.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateFeatureError,
    DeterminismError,
    DimensionError,
    UninitializedGradientError,
)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # interior gradients are not needed once propagated
            node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * a.data / (b.data * b.data))

    return _result(a.data / b.data, (a, b), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: x._accumulate(g * y))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: x._accumulate(g / x.data))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: x._accumulate(g * (1.0 - y * y)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner))

    return _result(y, (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: x._accumulate(g * inside))


# reductions and shape ------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        x._accumulate(_expand_reduced(g, shape, axis, keepdims))

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    total = tsum(x, axis, keepdims)
    count = x.data.size // max(total.data.size, 1)
    return total * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(orig)))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: x._accumulate(np.transpose(g, inverse)))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        x._accumulate(full)

    return _result(x.data[index], (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        weight._accumulate(full)

    return _result(weight.data[ids], (weight,), backward)


# linear algebra and normalisation -----------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), backward)


def softmax_with_bias(logits, bias=None) -> Tensor:
    """Row softmax of ``logits + bias`` over the last axis (max-subtracted)."""
    logits = as_tensor(logits)
    if bias is None:
        parents = (logits,)
        z = logits.data
    else:
        bias = as_tensor(bias)
        if bias.shape != logits.shape:
            raise DimensionError(f"softmax bias shape {bias.shape} does not match logits {logits.shape}")
        parents = (logits, bias)
        z = logits.data + bias.data
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        gz = y * (g - np.sum(g * y, axis=-1, keepdims=True))
        for p in parents:
            p._accumulate(gz)

    return _result(y, parents, backward)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def backward(g):
        x._accumulate(np.expand_dims(g, axis) * soft)

    return _result(np.squeeze(out, axis=axis), (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def backward(g):
        if x.requires_grad:
            dxhat = g * gamma.data
            x._accumulate(
                rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            )
        gamma._accumulate(g * xhat)
        beta._accumulate(g)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def l2_normalize(x) -> Tensor:
    """Scale every row (last axis) to unit Euclidean norm."""
    x = as_tensor(x)
    norms = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    bad = np.argwhere(norms[..., 0] < 1e-12)
    if len(bad):
        raise DegenerateFeatureError(f"zero-norm feature row at index {tuple(int(i) for i in bad[0])}")
    y = x.data / norms

    def backward(g):
        x._accumulate((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norms)

    return _result(y, (x,), backward)


# parameters ---------------------------------------------------------------

class ParameterStore:
    """Named tensors plus AdamW moments, a step counter and an rng.

    Frozen entries (``trainable=False``) live in the same store so that a
    single checkpoint captures the whole model; the optimizer skips them.
    """

    def __init__(self, seed: int = 0):
        self.params: dict[str, Tensor] = {}
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)
        self.config: dict = {}

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self, trainable: bool | None = None, prefix: str = "") -> list[str]:
        return [
            n for n, t in self.params.items()
            if n.startswith(prefix) and (trainable is None or t.requires_grad == trainable)
        ]

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def digest(self, names: Iterable[str] | None = None) -> str:
        """Hash of the raw bytes of the given (default: all) parameters."""
        h = hashlib.sha256()
        for n in sorted(self.params if names is None else names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()

    def copy(self) -> "ParameterStore":
        new = ParameterStore()
        for n, t in self.params.items():
            new.add(n, t.data.copy(), trainable=t.requires_grad)
        new.step_count = self.step_count
        new.m = {k: v.copy() for k, v in self.m.items()}
        new.v = {k: v.copy() for k, v in self.v.items()}
        new.rng = np.random.default_rng()
        new.rng.bit_generator.state = self.rng.bit_generator.state
        new.config = dict(self.config)
        return new


@dataclasses.dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 5e-2
    lr_max: float = 3e-3
    lr_min: float = 1e-5
    warmup_steps: int = 50
    total_steps: int = 2000
    grad_clip: float = 1.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ConfigurationError("eps must be positive")
        if self.lr_min > self.lr_max:
            raise ConfigurationError("lr_min must not exceed lr_max")
        if self.warmup_steps < 0 or self.total_steps <= 0:
            raise ConfigurationError("warmup_steps >= 0 and total_steps > 0 required")

    @classmethod
    def full_scale_preset(cls) -> "OptimizerConfig":
        """Full-scale settings: AdamW(0.9, 0.98, 1e-6), wd 5e-2, lr 2e-4 -> 1e-6, 500 warmup steps."""
        return cls(beta1=0.9, beta2=0.98, eps=1e-6, weight_decay=5e-2,
                   lr_max=2e-4, lr_min=1e-6, warmup_steps=500, total_steps=10_000)


def learning_rate(config: OptimizerConfig, step: int) -> float:
    """Linear warmup to ``lr_max`` then cosine decay to ``lr_min`` at ``total_steps``."""
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.lr_max * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    if span <= 0:
        return config.lr_min
    progress = min(max(step - config.warmup_steps, 0) / span, 1.0)
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + math.cos(math.pi * progress))


def _decays(t: Tensor) -> bool:
    # biases, norm gains, CLS vector and temperature are exempt
    return t.data.ndim >= 2


def adamw_step(store: ParameterStore, config: OptimizerConfig, step: int) -> ParameterStore:
    """One AdamW update in place; returns ``store`` for chaining.

    Raw gradients are clipped to global norm ``config.grad_clip`` before the
    moment update. Weight decay is decoupled and applied to matrices only.
    """
    params = store.trainable()
    for name, t in params.items():
        if t.grad is None:
            raise UninitializedGradientError(f"parameter {name!r} has no gradient")
    total = math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in params.values()))
    scale = 1.0
    if config.grad_clip is not None and total > config.grad_clip:
        scale = config.grad_clip / (total + 1e-6)

    lr = learning_rate(config, step)
    store.step_count += 1
    k = store.step_count
    c1 = 1.0 - config.beta1**k
    c2 = 1.0 - config.beta2**k
    for name, t in params.items():
        g = t.grad * scale
        m = store.m.get(name)
        v = store.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g * g
        store.m[name], store.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if config.weight_decay and _decays(t):
            t.data = t.data * (1.0 - lr * config.weight_decay)
        t.data = t.data - lr * update
    return store


# gradient checking --------------------------------------------------------

def _sample_coordinates(store, names, n_samples, rng, per_param):
    coords = []
    sizes = np.array([store[n].data.size for n in names])
    for n, size in zip(names, sizes):
        take = min(per_param, size)
        for flat in rng.choice(size, size=take, replace=False):
            coords.append((n, int(flat)))
    remaining = n_samples - len(coords)
    if remaining > 0:
        probs = sizes / sizes.sum()
        for idx in rng.choice(len(names), size=remaining, p=probs):
            n = names[idx]
            coords.append((n, int(rng.integers(store[n].data.size))))
    return coords


def finite_diff_check(
    loss_fn: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    h: float = 1e-6,
    n_samples: int = 256,
    names: Sequence[str] | None = None,
    seed: int = 0,
    per_param: int = 2,
    return_details: bool = False,
):
    """Max relative error between analytic and central-difference gradients.

    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    Perturbed evaluations run in ``np.longdouble``; the analytic pass runs in
    the store's own precision. Parameters are restored bitwise afterwards.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigurationError(f"step h={h} outside [1e-7, 1e-3]")
    names = list(names) if names is not None else store.names(trainable=True)
    store.zero_grad()
    loss = loss_fn(store)
    loss.backward()
    analytic = {
        n: (store[n].grad.copy() if store[n].grad is not None else np.zeros_like(store[n].data))
        for n in names
    }
    store.zero_grad()
    with no_grad():
        again = loss_fn(store).data
    if not np.array_equal(loss.data, again):
        raise DeterminismError(f"loss_fn is not deterministic: {loss.data!r} vs {again!r}")

    originals = {n: store[n].data for n in names}
    wide = np.longdouble
    rng = np.random.default_rng(seed)
    coords = _sample_coordinates(store, names, n_samples, rng, per_param)
    details = []
    worst = 0.0
    try:
        for n in names:
            store[n].data = originals[n].astype(wide)
        with no_grad():
            for n, flat in coords:
                arr = store[n].data.reshape(-1)
                x0 = arr[flat]
                arr[flat] = x0 + wide(h)
                f_plus = wide(loss_fn(store).data)
                arr[flat] = x0 - wide(h)
                f_minus = wide(loss_fn(store).data)
                arr[flat] = x0
                numeric = float((f_plus - f_minus) / (2 * wide(h)))
                a = float(analytic[n].reshape(-1)[flat])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
                details.append((n, flat, a, numeric, rel))
    finally:
        for n in names:
            store[n].data = originals[n]
    if return_details:
        return worst, details
    return worst
