"""Minimal reverse-mode autodiff on numpy arrays, MLPs, Adam and LR schedules.

Every differentiable value is a :class:`Tensor`.  Operations record their
parents and a backward closure when at least one input requires a gradient
and recording is enabled (see :func:`no_grad`).  :func:`backprop` walks the
recorded graph in reverse topological order.

All arithmetic is float64.
"""

from __future__ import annotations

import contextlib
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, TrainingError, UsageError

ACTIVATIONS = ("tanh", "silu", "identity")
CHECKPOINT_VERSION = 1

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


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    """A float64 array with an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backprop(self)

    # arithmetic -----------------------------------------------------------
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# elementwise binary ----------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


# elementwise unary -----------------------------------------------------------
def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a):
    a = as_tensor(a)
    s = sigmoid_np(a.data)
    out = a.data * s

    def bw(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _result(out, (a,), bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def sin(a):
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,))


def square(a):
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def activate(a, kind):
    if kind == "tanh":
        return tanh(a)
    if kind == "silu":
        return silu(a)
    if kind == "identity":
        return as_tensor(a)
    raise ConfigError(f"unknown activation {kind!r}")


# reductions and shape ops ----------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx):
    a = as_tensor(a)

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros(a.shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), bw)


def concat(items, axis=-1):
    items = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in items], axis=axis), tuple(items), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


def linear(x, weight, bias):
    """``x @ weight.T + bias`` as one graph node; weight is [out x in]."""
    x = as_tensor(x)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(x.data @ weight.data.T + bias.data, (x, weight, bias), bw)


def matvec(mat, vec):
    """Batched ``mat[b] @ vec[b]`` for mat [B, n, k] and vec [B, k]."""
    mat, vec = as_tensor(mat), as_tensor(vec)
    if mat.ndim == 2:
        return matmul(vec, _transpose(mat))
    return tsum(mat * reshape(vec, vec.shape[:-1] + (1, vec.shape[-1])), axis=-1)


def _transpose(a):
    return _result(a.data.T, (a,), lambda g: (g.T,))


# backprop --------------------------------------------------------------------
def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    The graph is released afterwards so the same forward pass cannot be
    backpropagated twice.
    """
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise UsageError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64, copy=True)
        node._parents = ()
        node._backward = None


# networks --------------------------------------------------------------------
@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: str


class MLP:
    """Feedforward network; weights are stored [out x in]."""

    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ConfigError("adjacent layer dimensions do not chain")
        if self.layers[-1].activation != "identity":
            raise ConfigError("last layer activation must be identity")

    @classmethod
    def create(cls, input_dim, hidden, output_dim, activation="tanh", rng=None,
               zero_output=False):
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = [input_dim, *hidden, output_dim]
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            bound = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
            if last and zero_output:
                w = np.zeros_like(w)
            layers.append(Layer(Tensor(w, requires_grad=True),
                                Tensor(np.zeros(n_out), requires_grad=True),
                                "identity" if last else activation))
        return cls(layers)

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].weight.shape[0]

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def grads(self):
        return [p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in self.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def copy(self):
        return MLP([Layer(Tensor(l.weight.data.copy(), l.weight.requires_grad),
                          Tensor(l.bias.data.copy(), l.bias.requires_grad),
                          l.activation) for l in self.layers])

    def fingerprint(self):
        """A hash of the raw parameter bytes, for change detection."""
        import hashlib

        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.data.tobytes())
        return h.hexdigest()

    def __call__(self, batch):
        return mlp_forward(self, batch)


def mlp_forward(params, batch):
    x = as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ConfigError(
            f"batch width {x.shape[-1] if x.ndim else None} != input_dim {params.input_dim}")
    for layer in params.layers:
        x = activate(linear(x, layer.weight, layer.bias), layer.activation)
    return x


def save_params(path, params):
    """Write a network checkpoint as ``.npz`` (atomic rename).

    Layout: ``format_version``, ``n_layers``, then per layer ``k``:
    ``w{k}`` [out x in], ``b{k}`` [out], ``act{k}`` (string).
    """
    arrays = {"format_version": np.array(CHECKPOINT_VERSION),
              "n_layers": np.array(len(params.layers))}
    for k, layer in enumerate(params.layers):
        arrays[f"w{k}"] = layer.weight.data
        arrays[f"b{k}"] = layer.bias.data
        arrays[f"act{k}"] = np.array(layer.activation)
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".npz")
    os.close(fd)
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_params(path):
    with np.load(path) as f:
        version = int(f["format_version"])
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        layers = [Layer(Tensor(f[f"w{k}"], requires_grad=True),
                        Tensor(f[f"b{k}"], requires_grad=True),
                        str(f[f"act{k}"]))
                  for k in range(int(f["n_layers"]))]
    return MLP(layers)


# optimisation ----------------------------------------------------------------
@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params, grads, state, rate, stage=None):
    """One bias-corrected Adam update, in place on ``params``."""
    if rate <= 0:
        raise UsageError("learning rate must be positive")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", stage=stage, step=state.step_count)
    state.step_count += 1
    b1, b2, t = state.beta1, state.beta2, state.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.data.shape:
            raise UsageError("Adam moment buffer shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


class Adam:
    """Adam bound to a fixed list of parameter tensors."""

    def __init__(self, params, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, beta1=beta1, beta2=beta2,
                                          epsilon=epsilon)

    def step(self, rate, stage=None):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        adam_step(self.params, grads, self.state, rate, stage=stage)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant learning rate.

    ``rate(step, stage) = initial_rate * stage_factor**max(0, stage - stage_offset)
    * decay_factor**n`` where ``n`` counts the milestones passed, or, with no
    milestones, ``floor(min(step, decay_until) / decay_every)``.
    """

    initial_rate: float
    decay_factor: float = 1.0
    decay_every: int = 1_000_000_000
    stage_factor: float = 1.0
    stage_offset: int = 1
    milestones: tuple = ()
    decay_until: int | None = None

    def __post_init__(self):
        if not self.initial_rate > 0:
            raise ConfigError("initial_rate must be positive", field="initial_rate")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must lie in (0, 1]", field="decay_factor")
        if not 0 < self.stage_factor <= 1:
            raise ConfigError("stage_factor must lie in (0, 1]", field="stage_factor")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1", field="decay_every")

    def rate(self, step, stage=None):
        if self.milestones:
            n = sum(1 for m in self.milestones if step >= m)
        else:
            s = step if self.decay_until is None else min(step, self.decay_until)
            n = s // self.decay_every
        lr = self.initial_rate * self.decay_factor ** n
        if stage is not None:
            lr *= self.stage_factor ** max(0, stage - self.stage_offset)
        return lr
