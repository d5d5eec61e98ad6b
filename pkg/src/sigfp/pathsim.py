"""Seeded Brownian drivers on a two-level grid and conditional ensembles.

Layout conventions used throughout the package:

* common increments on the fine grid: ``[N2, N_T * fine_factor, q]``
* common increments on the coarse grid: ``[N2, N_T, q]`` (sums of fine ones)
* idiosyncratic increments: ``[N2, N1, N_T, q]``
* initial states: ``[N2, N1, d]``

Random streams.  Each stream is a numpy ``Generator`` seeded by
``SeedSequence(seed, spawn_key=(purpose, epoch, kind, n2[, n1]))`` where
``purpose`` is a small integer naming the consumer (step-1 sampling, step-3
batches, evaluation, ...), ``epoch`` counts regenerations and ``kind`` is 0
for common paths and 1 for particles.  A particle stream draws its initial
state first and then its ``N_T x q`` increments.  Growing ``N1`` or ``N2``
therefore never changes previously drawn values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import sigkit
from .errors import ConfigError, InternalError

PURPOSES = {"step1": 1, "step3": 3, "eval": 7, "embed": 11, "oracle": 13}
_COMMON, _PARTICLE = 0, 1


@dataclass(frozen=True)
class TimeGrid:
    T: float = 1.0
    N_T: int = 120
    fine_factor: int = 4

    def __post_init__(self):
        if self.N_T < 1:
            raise ConfigError("must be >= 1", field="N_T")
        if self.fine_factor < 1:
            raise ConfigError("must be >= 1", field="fine_factor")
        if not self.T > 0:
            raise ConfigError("must be positive", field="T")

    @property
    def dt(self):
        return self.T / self.N_T

    @property
    def times(self):
        return np.arange(self.N_T + 1) * self.dt

    @property
    def fine_dt(self):
        return self.T / (self.N_T * self.fine_factor)

    @property
    def fine_times(self):
        return np.arange(self.N_T * self.fine_factor + 1) * self.fine_dt


@dataclass
class DriverBlock:
    common_fine: np.ndarray
    idio: np.ndarray
    x0: np.ndarray
    grid: TimeGrid
    seed: int
    epoch: int = 0

    @property
    def N2(self):
        return self.idio.shape[0]

    @property
    def N1(self):
        return self.idio.shape[1]

    @property
    def q(self):
        return self.idio.shape[-1]

    @property
    def common(self):
        f = self.grid.fine_factor
        n2, nf, q = self.common_fine.shape
        return self.common_fine.reshape(n2, nf // f, f, q).sum(axis=2)

    def common_path(self):
        """Common Brownian values at fine nodes, ``[N2, N_T*f + 1, q]``."""
        z = np.zeros((self.N2, 1, self.q))
        return np.concatenate([z, np.cumsum(self.common_fine, axis=1)], axis=1)

    def common_at_coarse(self):
        return self.common_path()[:, :: self.grid.fine_factor]

    def idio_path(self):
        z = np.zeros((self.N2, self.N1, 1, self.q))
        return np.concatenate([z, np.cumsum(self.idio, axis=2)], axis=2)

    def signature_features(self, M, feature="logsig"):
        """Features of the augmented common path at each coarse node.

        Returns ``[N_T + 1, N2, F]``; node ``i`` only sees fine increments
        up to ``t_i``.
        """
        path = sigkit.AugPath(self.grid.fine_times, self.common_path(), augmented=True)
        sigs = sigkit.prefix_signatures(path, M, every=self.grid.fine_factor)
        return sigkit.features(sigs, feature)


def stream(seed, purpose, epoch, kind, *index):
    p = PURPOSES[purpose] if isinstance(purpose, str) else int(purpose)
    ss = np.random.SeedSequence(int(seed), spawn_key=(p, int(epoch), kind, *map(int, index)))
    return np.random.default_rng(ss)


def generate_drivers(seed, grid, N1, N2, q, mu0, purpose="step1", epoch=0):
    """Draw a reproducible block of common and idiosyncratic increments.

    ``mu0(rng, n)`` must return an ``[n, d]`` array of initial states.
    """
    for name, val in (("N1", N1), ("N2", N2), ("q", q)):
        if val < 1:
            raise ConfigError("must be >= 1", field=name)
    nf = grid.N_T * grid.fine_factor
    sd_f = np.sqrt(grid.fine_dt)
    sd_c = np.sqrt(grid.dt)
    common = np.empty((N2, nf, q))
    idio = np.empty((N2, N1, grid.N_T, q))
    x0 = None
    for n2 in range(N2):
        common[n2] = stream(seed, purpose, epoch, _COMMON, n2).standard_normal((nf, q)) * sd_f
        for n1 in range(N1):
            rng = stream(seed, purpose, epoch, _PARTICLE, n2, n1)
            x = np.asarray(mu0(rng, 1), dtype=np.float64)
            if x0 is None:
                x0 = np.empty((N2, N1, x.shape[-1]))
            x0[n2, n1] = x[0]
            idio[n2, n1] = rng.standard_normal((grid.N_T, q)) * sd_c
    return DriverBlock(common, idio, x0, grid, seed, epoch)


def write_path_dump(path, block):
    """CSV dump: ``step, n2, n1, kind, c0..c{q-1}``.

    ``kind`` is ``common`` (n1 = -1, fine-grid step index) or ``idio``
    (coarse step index).  Values are increments.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "n2", "n1", "kind"] + [f"c{j}" for j in range(block.q)])
        for n2 in range(block.N2):
            for s in range(block.common_fine.shape[1]):
                vals = [repr(float(v)) for v in block.common_fine[n2, s]]
                w.writerow([s, n2, -1, "common"] + vals)
        for n2 in range(block.N2):
            for n1 in range(block.N1):
                for s in range(block.idio.shape[2]):
                    vals = [repr(float(v)) for v in block.idio[n2, n1, s]]
                    w.writerow([s, n2, n1, "idio"] + vals)


@dataclass
class CondEnsemble:
    """Particles grouped by common path: arrays ``[N_T + 1, N2, N1, ...]``.

    ``y`` and ``z`` may be absent when only the forward state is needed.
    The empirical conditional law at ``(t_i, n2)`` is the uniform measure on
    ``x[i, n2]`` (jointly with ``y[i, n2]``, ``z[i, n2]``).
    """

    times: np.ndarray
    x: np.ndarray
    y: np.ndarray | None = None
    z: np.ndarray | None = None

    def __post_init__(self):
        base = self.x.shape[:3]
        for name in ("y", "z"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[:3] != base:
                raise InternalError(f"ragged ensemble: {name} has {arr.shape[:3]}, x has {base}")
        if len(self.times) != base[0]:
            raise InternalError("time axis does not match particle arrays")

    @property
    def N1(self):
        return self.x.shape[2]

    @property
    def N2(self):
        return self.x.shape[1]

    def mean(self, name="x"):
        return getattr(self, name).mean(axis=2)

    def var(self, name="x"):
        return getattr(self, name).var(axis=2)


def empirical_conditional(times, x, y=None, z=None):
    """Group simulated states by common index.

    Accepts arrays ``[N_T + 1, N2, N1, ...]`` or lists of per-time arrays.
    """
    def stack(a):
        if a is None:
            return None
        if isinstance(a, (list, tuple)):
            shapes = {np.shape(v) for v in a}
            if len(shapes) != 1:
                raise InternalError(f"ragged particle counts across times: {sorted(shapes)}")
            a = np.stack(a)
        return np.asarray(a, dtype=np.float64)

    return CondEnsemble(np.asarray(times, dtype=np.float64), stack(x), stack(y), stack(z))
