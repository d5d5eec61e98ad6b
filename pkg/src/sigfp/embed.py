"""Supervised learning of the measure embeddings from empirical conditional laws.

Two hypothesis classes are supported:

``linear``  (Archi. 1) a network maps ``(t, state)`` to a coefficient block
            ``[ell, F]``; the prediction is its contraction with the
            flattened signature features.
``direct``  (Archi. 2) a network maps ``(t, state, features)`` to ``R^ell``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnkit as nk
from .errors import ConfigError, TrainingError, UsageError
from .sigkit import feature_dim

VARIANTS = ("linear", "direct")


class EmbedArch:
    def __init__(self, net, variant, feature, depth, q, state_dim, ell, with_time=True):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}", field="variant")
        self.net = net
        self.variant = variant
        self.feature = feature
        self.depth = depth
        self.q = q
        self.state_dim = state_dim
        self.ell = ell
        self.with_time = with_time
        self.n_features = feature_dim(q, depth, feature)
        base = state_dim + (1 if with_time else 0)
        want_in = base + (self.n_features if variant == "direct" else 0)
        want_out = ell * (self.n_features if variant == "linear" else 1)
        if net.input_dim != want_in or net.output_dim != want_out:
            raise ConfigError(
                f"network {net.input_dim}->{net.output_dim} does not fit {variant} "
                f"embedding {want_in}->{want_out}")

    @classmethod
    def create(cls, variant, feature, depth, q, state_dim, ell, hidden=(64, 64),
               activation="silu", rng=None, with_time=True, zero_output=True):
        F = feature_dim(q, depth, feature)
        base = state_dim + (1 if with_time else 0)
        if variant == "direct":
            n_in, n_out = base + F, ell
        elif variant == "linear":
            n_in, n_out = base, ell * F
        else:
            raise ConfigError(f"unknown variant {variant!r}", field="variant")
        net = nk.MLP.create(n_in, hidden, n_out, activation=activation, rng=rng,
                            zero_output=zero_output)
        return cls(net, variant, feature, depth, q, state_dim, ell, with_time)

    def copy(self):
        return EmbedArch(self.net.copy(), self.variant, self.feature, self.depth, self.q,
                         self.state_dim, self.ell, self.with_time)

    def __call__(self, t, state, feats):
        return embed_predict(self, t, state, feats)


def _time_column(t, n):
    if np.ndim(t) == 0:
        return np.full((n, 1), float(t))
    return np.asarray(t, dtype=np.float64).reshape(n, 1)


def embed_predict(arch, t, state, feats):
    """Evaluate the learned embedding; returns a ``[B, ell]`` tensor.

    ``state`` may be a tensor (gradients flow through it); ``t`` is a scalar
    or per-row array and is ignored for terminal embeddings.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[-1] != arch.n_features:
        raise UsageError(f"feature length {feats.shape[-1]} != {arch.n_features}")
    state = nk.as_tensor(state)
    n = state.shape[0]
    cols = [state]
    if arch.with_time:
        cols.insert(0, nk.Tensor(_time_column(t, n)))
    if arch.variant == "direct":
        return arch.net(nk.concat(cols + [nk.Tensor(feats)], axis=1))
    coef = arch.net(nk.concat(cols, axis=1) if len(cols) > 1 else cols[0])
    coef = coef.reshape(n, arch.ell, arch.n_features)
    return (coef * feats.reshape(n, 1, arch.n_features)).sum(axis=-1)


@dataclass
class EmbedData:
    """Flattened supervised-learning set: one row per (t_i, n2, n1)."""

    t: np.ndarray
    state: np.ndarray
    feats: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        n = len(self.target)
        if not (len(self.t) == len(self.state) == len(self.feats) == n):
            raise UsageError("embedding inputs and targets are not aligned")

    def __len__(self):
        return len(self.target)

    def take(self, idx):
        return EmbedData(self.t[idx], self.state[idx], self.feats[idx], self.target[idx])


def compute_targets(problem, ens, which=None):
    """Exact embeddings evaluated on the empirical conditional measures.

    Returns ``{i: array}``; for ``i`` in 1..4 the array is
    ``[N_T, N2, N1, ell]`` (nodes t_0..t_{N_T-1}), for ``i == 5`` it is
    ``[N2, N1, ell]`` at the terminal node.
    """
    which = sorted(problem.m_exact) if which is None else which
    out = {}
    n_t = len(ens.times)
    for i in which:
        fn = problem.m_exact[i]
        if i == 5:
            val = np.asarray(fn(ens.times[-1], _theta_at(ens, n_t - 1), _theta_at(ens, n_t - 1)))
        else:
            val = np.stack([np.asarray(fn(ens.times[k], _theta_at(ens, k), _theta_at(ens, k)))
                            for k in range(n_t - 1)])
        if val.shape[-1] != problem.ell:
            raise ConfigError(f"m{i} returned width {val.shape[-1]}, problem declares ell={problem.ell}")
        if not np.all(np.isfinite(val)):
            raise TrainingError(f"non-finite target for m{i}")
        out[i] = val
    return out


@dataclass
class Theta:
    x: np.ndarray
    y: np.ndarray | None = None
    z: np.ndarray | None = None


def _theta_at(ens, k):
    return Theta(ens.x[k], None if ens.y is None else ens.y[k],
                 None if ens.z is None else ens.z[k])


def train_embed(arch, data, schedule, steps, batch_size=None, rng=None, stage=None,
                patience=100, opt=None, step0=0):
    """Adam on mean squared error; returns the per-step loss trace.

    Pass ``opt`` and ``step0`` to continue an optimizer across calls.
    Raises TrainingError if the loss stays above 10x its initial value for
    ``patience`` consecutive steps.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    opt = nk.Adam(arch.net.parameters()) if opt is None else opt
    n = len(data)
    trace = []
    initial = None
    bad = 0
    for step in range(steps):
        batch = data if batch_size is None or batch_size >= n else data.take(
            rng.integers(0, n, size=batch_size))
        pred = embed_predict(arch, batch.t, batch.state, batch.feats)
        err = pred - batch.target
        loss = (err * err).sum(axis=1).mean()
        opt.zero_grad()
        nk.backprop(loss)
        lv = float(loss.data)
        trace.append(lv)
        if initial is None:
            initial = lv
        bad = bad + 1 if lv > 10 * max(initial, 1e-300) else 0
        if bad >= patience:
            raise TrainingError("embedding training diverged", stage=stage, step=step, trace=trace)
        opt.step(schedule.rate(step0 + step, stage), stage=stage)
    return trace


def evaluate_loss(arch, data, chunk=65536):
    total = 0.0
    with nk.no_grad():
        for s in range(0, len(data), chunk):
            part = data.take(slice(s, s + chunk))
            err = embed_predict(arch, part.t, part.state, part.feats).data - part.target
            total += float(np.sum(err * err))
    return total / max(len(data), 1)


def mae_at_time(arch, times, states, feats, exact):
    """MAE curve over time nodes.

    ``states`` ``[J, n_t, s]``, ``feats`` ``[J, n_t, F]``, ``exact``
    ``[J, n_t, ell]``; returns ``[n_t]``.
    """
    J, n_t = states.shape[:2]
    pred = np.empty_like(np.asarray(exact, dtype=np.float64))
    with nk.no_grad():
        for i in range(n_t):
            pred[:, i] = embed_predict(arch, times[i], states[:, i], feats[:, i]).data
    diff = np.abs(pred - exact)
    return np.sqrt(np.sum(diff * diff, axis=-1)).mean(axis=0)
