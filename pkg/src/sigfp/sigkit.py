"""Truncated signatures and log-signatures of piecewise-linear paths.

Tensors are stored level by level.  Level ``k`` of a :class:`TruncatedTensor`
is an array of shape ``batch + (n**k,)`` holding the row-major flattening of
an element of ``(R^n)^{⊗k}``; level 0 has shape ``batch + (1,)``.  Every
operation broadcasts over the leading batch axes, so one call handles a
whole ensemble of common-noise paths.

Feature layout fed to networks (``flatten``): levels concatenated in order,
row-major inside each level.  Signatures keep the leading constant 1,
log-signatures drop level 0, so

    len(flatten(sig))    == (n**(M+1) - 1) / (n - 1)
    len(flatten(logsig)) == len(flatten(sig)) - 1
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError

FEATURES = ("sig", "logsig")


def sig_dim(q, M):
    """Flattened signature length of the time-augmented q-dimensional path."""
    if q < 1 or M < 1:
        raise UsageError("sig_dim needs q >= 1 and M >= 1")
    return ((q + 1) ** (M + 1) - 1) // q


def feature_dim(q, M, feature="sig"):
    if feature not in FEATURES:
        raise UsageError(f"unknown feature kind {feature!r}")
    return sig_dim(q, M) - (1 if feature == "logsig" else 0)


@dataclass
class TruncatedTensor:
    ambient_dim: int
    depth: int
    levels: list

    def __post_init__(self):
        n = self.ambient_dim
        if len(self.levels) != self.depth + 1:
            raise UsageError("need depth + 1 levels")
        for k, lev in enumerate(self.levels):
            if lev.shape[-1] != n ** k:
                raise UsageError(f"level {k} has {lev.shape[-1]} entries, expected {n ** k}")

    @property
    def batch_shape(self):
        return self.levels[0].shape[:-1]

    def level(self, k):
        """Level k reshaped to ``batch + (n,)*k``."""
        return self.levels[k].reshape(self.batch_shape + (self.ambient_dim,) * k)

    def flatten(self, include_level0=True):
        start = 0 if include_level0 else 1
        return np.concatenate(self.levels[start:], axis=-1)

    def __getitem__(self, idx):
        return TruncatedTensor(self.ambient_dim, self.depth,
                               [lev[idx] for lev in self.levels])

    def max_abs_diff(self, other):
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.levels, other.levels))


def identity(n, M, batch=()):
    levels = [np.ones(batch + (1,))]
    levels += [np.zeros(batch + (n ** k,)) for k in range(1, M + 1)]
    return TruncatedTensor(n, M, levels)


def _outer(a, b):
    out = a[..., :, None] * b[..., None, :]
    return out.reshape(out.shape[:-2] + (-1,))


def _check_pair(a, b):
    if a.ambient_dim != b.ambient_dim or a.depth != b.depth:
        raise UsageError(
            f"tensor mismatch: dims {a.ambient_dim}/{b.ambient_dim}, depths {a.depth}/{b.depth}")


def tensor_product(a, b):
    """Truncated product in the tensor algebra (Chen concatenation)."""
    _check_pair(a, b)
    M = a.depth
    levels = []
    for k in range(M + 1):
        acc = None
        for i in range(k + 1):
            ai, bj = a.levels[i], b.levels[k - i]
            if i == 0:
                term = ai * bj
            elif i == k:
                term = ai * bj[..., :1]
            else:
                term = _outer(ai, bj)
            acc = term if acc is None else acc + term
        levels.append(acc)
    return TruncatedTensor(a.ambient_dim, M, levels)


chen_concat = tensor_product


def segment_signature(delta, M):
    """Signature of a straight segment with increment ``delta``: delta^{⊗k}/k!."""
    delta = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(delta)):
        raise DataError("non-finite increment")
    n = delta.shape[-1]
    levels = [np.ones(delta.shape[:-1] + (1,))]
    cur = levels[0]
    for k in range(1, M + 1):
        cur = _outer(cur, delta) / k if k > 1 else delta.copy()
        levels.append(cur)
    return TruncatedTensor(n, M, levels)


def extend(sig, delta):
    """``sig ⊗ exp(delta)`` without forming the segment tensor separately.

    Horner form: level k of the product is
    sum_j sig_j ⊗ delta^{⊗(k-j)}/(k-j)!, computed from the top level down.
    """
    delta = np.asarray(delta, dtype=np.float64)
    M = sig.depth
    out = [sig.levels[0].copy()]
    for k in range(1, M + 1):
        # acc = ((sig_0 δ/k + sig_1) δ/(k-1) + sig_2) ... + sig_k
        acc = sig.levels[0] * np.ones(delta.shape[:-1] + (1,))
        for j in range(1, k + 1):
            acc = _outer(acc, delta) / (k - j + 1) + sig.levels[j]
        out.append(acc)
    return TruncatedTensor(sig.ambient_dim, M, out)


@dataclass
class AugPath:
    """Sampled path; with ``augmented`` the effective node value is (t, value)."""

    times: np.ndarray
    values: np.ndarray
    augmented: bool = True

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[-2] != len(self.times):
            raise DataError("values and times disagree on node count")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise DataError("times must be strictly increasing")

    @property
    def dim(self):
        return self.values.shape[-1] + (1 if self.augmented else 0)

    def increments(self):
        dv = np.diff(self.values, axis=-2)
        if not self.augmented:
            return dv
        dt = np.broadcast_to(np.diff(self.times)[:, None], dv.shape[:-1] + (1,))
        return np.concatenate([dt, dv], axis=-1)


def path_signature(path, M):
    """Signature of the linear interpolation of ``path`` (left fold of Chen)."""
    inc = path.increments()
    sig = identity(path.dim, M, inc.shape[:-2])
    for j in range(inc.shape[-2]):
        sig = extend(sig, inc[..., j, :])
    return sig


def prefix_signatures(path, M, every=1):
    """Signatures of every prefix ``[t_0, t_{i*every}]``, stacked on axis 0."""
    inc = path.increments()
    sig = identity(path.dim, M, inc.shape[:-2])
    out = [sig]
    for j in range(inc.shape[-2]):
        sig = extend(sig, inc[..., j, :])
        if (j + 1) % every == 0:
            out.append(sig)
    return TruncatedTensor(path.dim, M, [np.stack([s.levels[k] for s in out])
                                         for k in range(M + 1)])


@dataclass
class SignatureStream:
    """Running signature that is extended one node at a time."""

    ambient_dim: int
    depth: int
    batch: tuple = ()
    sig: TruncatedTensor = field(init=False)

    def __post_init__(self):
        self.sig = identity(self.ambient_dim, self.depth, self.batch)

    def push(self, delta):
        self.sig = extend(self.sig, delta)
        return self.sig


def _power_series(x, coeffs, with_unit):
    """sum_n coeffs[n] x^{⊗n} for x with zero level 0, truncated."""
    M = x.depth
    batch = x.batch_shape
    result = identity(x.ambient_dim, M, batch) if with_unit else None
    if result is not None:
        result.levels[0] = result.levels[0] * coeffs[0]
    power = x
    for n in range(1, M + 1):
        scaled = [lev * coeffs[n] for lev in power.levels]
        if result is None:
            result = TruncatedTensor(x.ambient_dim, M, scaled)
        else:
            result = TruncatedTensor(x.ambient_dim, M,
                                     [a + b for a, b in zip(result.levels, scaled)])
        if n < M:
            power = tensor_product(power, x)
    return result


def log_signature(sig):
    """Truncated tensor logarithm; level 0 of the result is 0."""
    if not np.allclose(sig.levels[0], 1.0, rtol=0, atol=1e-12):
        raise UsageError("log_signature needs level-0 coefficient 1")
    x = TruncatedTensor(sig.ambient_dim, sig.depth,
                        [np.zeros_like(sig.levels[0])] + list(sig.levels[1:]))
    coeffs = [0.0] + [(-1.0) ** (n + 1) / n for n in range(1, sig.depth + 1)]
    return _power_series(x, coeffs, with_unit=False)


def tensor_exp(x):
    """Truncated tensor exponential of an element with level 0 equal to 0."""
    if np.any(np.abs(x.levels[0]) > 1e-12):
        raise UsageError("tensor_exp needs level-0 coefficient 0")
    coeffs = [1.0 / math.factorial(n) for n in range(x.depth + 1)]
    return _power_series(x, coeffs, with_unit=True)


def features(sig, feature="sig"):
    """Flattened network features: sig keeps level 0, logsig drops it."""
    if feature == "sig":
        return sig.flatten(include_level0=True)
    if feature == "logsig":
        return log_signature(sig).flatten(include_level0=False)
    raise UsageError(f"unknown feature kind {feature!r}")
