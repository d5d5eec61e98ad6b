"""Benchmark problems: Gaussian-kernel embedding, analytic MV-FBSDE, flocking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnkit as nk
from .embed import EmbedArch, EmbedData, Theta, mae_at_time, train_embed
from .errors import UsageError
from .pathsim import TimeGrid, generate_drivers
from .metrics import mee
from .solver import FbsdeProblem, simulate

BENCHMARKS = ("gaussian-kernel", "analytic-mvfbsde", "flocking")


def _cols(a, n):
    """Broadcast a ``[B, 1]`` tensor across ``n`` columns."""
    return a * nk.Tensor(np.ones((1, n)))


# --------------------------------------------------------------------------
# Gaussian kernel embedding, X = W + W^0
# --------------------------------------------------------------------------
class GaussianKernelBench:
    """Embedding ``E[exp(-|x - x'|^2 / q)]`` under the conditional law of W + W^0."""

    def __init__(self, q):
        self.q = q
        self.d = q
        self.ell = 1

    def states(self, drivers):
        """``X = W + W^0`` on the coarse grid, ``[N_T + 1, N2, N1, q]``."""
        w = drivers.idio_path()
        w0 = drivers.common_at_coarse()[:, None]
        return np.moveaxis(w + w0, 2, 0)

    def kernel_target(self, t, query, particles):
        x = query.x
        xp = particles.x
        diff = x[:, :, None, :] - xp[:, None, :, :]
        k = np.exp(-np.sum(diff * diff, axis=-1) / self.q)
        return k.mean(axis=2)[..., None]

    @property
    def m_exact(self):
        return {1: self.kernel_target}

    def closed_form(self, t, x, w0_t):
        q = self.q
        r2 = np.sum((np.asarray(x) - np.asarray(w0_t)) ** 2, axis=-1)
        return (q / (q + 2 * t)) ** (q / 2) * np.exp(-r2 / (q + 2 * t))


@dataclass
class KernelExperiment:
    """Supervised learning of the kernel embedding from fresh samples each epoch."""

    q: int = 1
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(1.0, 40, 4))
    N1: int = 64
    N2: int = 32
    epochs: int = 50
    steps_per_epoch: int = 50
    batch: int = 1024
    depth: int = 2
    feature: str = "logsig"
    variant: str = "direct"
    hidden: tuple = (64, 64)
    activation: str = "silu"
    schedule: nk.LrSchedule = field(
        default_factory=lambda: nk.LrSchedule(3e-3, 0.95, 100, decay_until=5000))
    eval_J: int = 1000
    seed: int = 0


def kernel_dataset(bench, drivers, feats):
    """Flattened (t, x, features) -> empirical kernel target for t_0..t_{N_T-1}."""
    x = bench.states(drivers)
    n_t = x.shape[0] - 1
    times = drivers.grid.times
    target = np.stack([bench.kernel_target(times[i], Theta(x[i]), Theta(x[i]))
                       for i in range(n_t)])
    B = drivers.N2 * drivers.N1
    t = np.repeat(times[:n_t], B)[:, None]
    f = np.repeat(feats[:n_t], drivers.N1, axis=1)
    return EmbedData(t, x[:n_t].reshape(n_t * B, -1), f.reshape(n_t * B, -1),
                     target.reshape(n_t * B, 1))


def run_kernel_experiment(bench, cfg, on_epoch=None):
    """Train one embedding; returns ``(arch, mae_curve [N_T + 1], loss_trace)``.

    The MAE is measured against the closed form on ``eval_J`` held-out
    common paths with one particle each.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(102,)))
    arch = EmbedArch.create(cfg.variant, cfg.feature, cfg.depth, bench.q, bench.q, 1,
                            cfg.hidden, cfg.activation, rng)
    opt = nk.Adam(arch.net.parameters())
    mu0 = lambda r, n: np.zeros((n, bench.q))  # noqa: E731
    trace = []
    for epoch in range(cfg.epochs):
        drv = generate_drivers(cfg.seed, cfg.grid, cfg.N1, cfg.N2, bench.q, mu0,
                               purpose="embed", epoch=epoch)
        data = kernel_dataset(bench, drv, drv.signature_features(cfg.depth, cfg.feature))
        trace += train_embed(arch, data, cfg.schedule, cfg.steps_per_epoch, cfg.batch, rng,
                             opt=opt, step0=epoch * cfg.steps_per_epoch)
        if on_epoch is not None:
            on_epoch(epoch, trace)
    drv = generate_drivers(cfg.seed, cfg.grid, 1, cfg.eval_J, bench.q, mu0, purpose="eval")
    feats = drv.signature_features(cfg.depth, cfg.feature)
    x = bench.states(drv)[:, :, 0]
    times = cfg.grid.times
    exact = bench.closed_form(times[:, None], x, drv.common_at_coarse().swapaxes(0, 1))
    curve = mae_at_time(arch, times, x.swapaxes(0, 1), feats.swapaxes(0, 1),
                        exact.swapaxes(0, 1)[..., None])
    return arch, curve, trace


# --------------------------------------------------------------------------
# Analytic MV-FBSDE
# --------------------------------------------------------------------------
def analytic_bench_oracle(t, w, w0):
    """Closed-form (X, Y, Z, Z0) for X_0 = 0; Z and Z0 are ``[..., 1, d]``."""
    x = np.asarray(w) + np.asarray(w0)
    d = x.shape[-1]
    arg = t + x.sum(axis=-1, keepdims=True) / math.sqrt(d)
    y = np.sin(arg)
    zrow = np.cos(arg)[..., None] / math.sqrt(d) * np.ones(x.shape[:-1] + (1, d))
    return x, y, zrow, zrow.copy()


class AnalyticMvFbsdeBench:
    """The MV-FBSDE with explicit solution X = W + W^0, Y = sin(t + sum X / sqrt d)."""

    def __init__(self, d, T=1.0):
        self.d = d
        self.q = d
        self.T = T
        self.ell = d + 2

    def mu0(self, rng, n):
        return np.zeros((n, self.d))

    def drift(self, t, x, y, z, z0, m1):
        d = self.d
        c = d + 2.0 * t
        kern = m1[:, 0:1]
        mx = m1[:, 1:d + 1]
        my = m1[:, d + 1:d + 2]
        diff = x - mx
        r2 = (diff * diff).sum(axis=1, keepdims=True)
        first = nk.sin(kern - nk.exp(r2 * (-1.0 / c)) * (d / c) ** (d / 2))
        second = 0.5 * (my - nk.sin(t + mx.sum(axis=1, keepdims=True) * (1 / math.sqrt(d)))
                        * math.exp(-t / 2))
        return _cols(first + second, d)

    def vol(self, t, x, y, z, m):
        return np.eye(self.d)

    def driver(self, t, x, y, z, z0, m4):
        """Minus the dt-coefficient of dY (the Y recursion subtracts h dt)."""
        n = z.shape[0]
        zf = z.reshape(n, self.d)
        z0f = z0.reshape(n, self.d)
        lin = (zf + z0f).sum(axis=1, keepdims=True) * (1 / (2 * math.sqrt(self.d)))
        root = nk.sqrt(2.0 * y * y + (zf * zf).sum(axis=1, keepdims=True)
                       + (z0f * z0f).sum(axis=1, keepdims=True) + 1.0)
        return -(lin - y + root - math.sqrt(3.0))

    def terminal(self, x, m5):
        return nk.sin(self.T + x.sum(axis=1, keepdims=True) * (1 / math.sqrt(self.d)))

    def m1_exact(self, t, query, particles):
        x = query.x
        xp, yp = particles.x, particles.y
        diff = x[:, :, None, :] - xp[:, None, :, :]
        kern = np.exp(-np.sum(diff * diff, axis=-1) / self.d).mean(axis=2)
        mx = np.broadcast_to(xp.mean(axis=1, keepdims=True), x.shape)
        my = np.broadcast_to(yp.mean(axis=1, keepdims=True), x.shape[:-1] + (1,))
        return np.concatenate([kern[..., None], mx, my], axis=-1)

    def oracle(self, drivers):
        """Reference trajectories ``[n_t, B, ...]`` for the given drivers."""
        n1 = drivers.N1
        w = np.repeat(drivers.idio_path(), 1, axis=0).reshape(-1, drivers.grid.N_T + 1, self.d)
        w0 = np.repeat(drivers.common_at_coarse(), n1, axis=0)
        t = drivers.grid.times[None, :, None]
        x, y, z, z0 = analytic_bench_oracle(t, w, w0)
        x = x + drivers.x0.reshape(-1, 1, self.d)
        return {k: np.swapaxes(v, 0, 1) for k, v in
                {"x": x, "y": y, "z": z, "z0": z0}.items()}

    def problem(self):
        return FbsdeProblem(
            name="analytic-mvfbsde", d=self.d, dy=1, q=self.d, ell=self.ell, T=self.T,
            mu0=self.mu0, b=self.drift, sigma=self.vol, sigma0=self.vol, h=self.driver,
            g=self.terminal, m_exact={1: self.m1_exact}, embed_state="x",
            oracle=self.oracle)


# --------------------------------------------------------------------------
# Cucker-Smale flocking
# --------------------------------------------------------------------------
def _iso_scale(mat, name):
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    s = mat[0, 0]
    if not np.allclose(mat, s * np.eye(len(mat))):
        raise UsageError(f"{name} must be a multiple of the identity")
    return float(s)


def riccati_eta(t, T, R=0.5, Q=0.5):
    """Solution of eta' - eta R^{-1} eta / 2 + 2Q = 0, eta(T) = 0 (isotropic R, Q).

    For R = Q = 0.5 I this is (e^{2T} - e^{2t}) / (e^{2t} + e^{2T}) = tanh(T - t).
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t > T + 1e-12):
        raise UsageError("riccati_eta needs t <= T")
    r = _iso_scale(R, "R")
    qc = _iso_scale(Q, "Q")
    a, c = 1.0 / (2.0 * r), 2.0 * qc
    return math.sqrt(c / a) * np.tanh(math.sqrt(a * c) * (T - t))


def flocking_m4(x, v, xp, vp, beta, Q):
    """Distribution-dependence of the flocking driver.

    Query ``x, v`` ``[..., n, d]``, particles ``xp, vp`` ``[..., m, d]``;
    returns ``[..., n, 2d]`` stacking ``J^T Q a`` and ``a * E[-w]`` with
    ``a = E[w (v' - v)]`` and ``J_ij = E[d w / d x_j (v'_i - v_i)]``.
    """
    Q = np.asarray(Q, dtype=np.float64)
    dx = x[..., :, None, :] - xp[..., None, :, :]
    dv = vp[..., None, :, :] - v[..., :, None, :]
    base = 1.0 + np.sum(dx * dx, axis=-1)
    w = base ** (-beta)
    a = np.mean(w[..., None] * dv, axis=-2)
    dw = (-2.0 * beta) * (base ** (-beta - 1.0))[..., None] * dx
    J = np.einsum("...ki,...kj->...ij", dv, dw) / dx.shape[-2]
    first = np.einsum("...ij,...i->...j", J, a @ Q.T)
    second = a * np.mean(-w, axis=-1)[..., None]
    return np.concatenate([first, second], axis=-1)


class FlockingBench:
    """Mean-field Cucker-Smale flocking with common noise; state (x, v) in R^{2d}."""

    def __init__(self, d=3, beta=0.0, C=0.1, D=0.3, R=0.5, Q=0.5, T=1.0, v0_mean=1.0,
                 chunk=32):
        self.d = d
        self.q = d
        self.beta = beta
        self.C = np.eye(d) * C if np.ndim(C) == 0 else np.asarray(C, dtype=np.float64)
        self.D = np.eye(d) * D if np.ndim(D) == 0 else np.asarray(D, dtype=np.float64)
        self.R = np.eye(d) * R if np.ndim(R) == 0 else np.asarray(R, dtype=np.float64)
        self.Q = np.eye(d) * Q if np.ndim(Q) == 0 else np.asarray(Q, dtype=np.float64)
        self.Rinv = np.linalg.inv(self.R)
        self.T = T
        self.v0_mean = v0_mean
        self.ell = 2 * d
        self.chunk = chunk
        z = np.zeros((d, d))
        self._sig = np.vstack([z, self.C])
        self._sig0 = np.vstack([z, self.D])

    def weight(self, r):
        return (1.0 + np.asarray(r) ** 2) ** (-self.beta)

    def mu0(self, rng, n):
        x = rng.standard_normal((n, self.d))
        v = self.v0_mean + rng.standard_normal((n, self.d))
        return np.concatenate([x, v], axis=1)

    def drift(self, t, x, y, z, z0, m1):
        d = self.d
        vel = x[:, d:]
        ctrl = y[:, d:] @ nk.Tensor(-0.5 * self.Rinv.T)
        return nk.concat([vel, ctrl], axis=1)

    def vol(self, t, x, y, z, m):
        return self._sig

    def vol0(self, t, x, y, z, m):
        return self._sig0

    def driver(self, t, x, y, z, z0, m4):
        """(d_x H, d_v H) with the distribution terms supplied by m4."""
        d = self.d
        hx = 2.0 * m4[:, :d]
        hv = y[:, :d] + m4[:, d:] @ nk.Tensor(2.0 * self.Q.T)
        return nk.concat([hx, hv], axis=1)

    def terminal(self, x, m5):
        return nk.Tensor(np.zeros((x.shape[0], 2 * self.d)))

    def hamiltonian(self, x, v, y, u, xp, vp):
        """H(x, v, f, y, u) for one agent against particles (xp, vp)."""
        w = self.weight(np.linalg.norm(x - xp, axis=-1))
        a = np.mean(w[:, None] * (vp - v), axis=0)
        return float(np.dot(np.concatenate([v, u]), y) + a @ self.Q @ a + u @ self.R @ u)

    def optimal_control(self, y):
        return -0.5 * self.Rinv @ np.asarray(y)[self.d:]

    def m4_exact(self, t, query, particles):
        d = self.d
        x, v = query.x[..., :d], query.x[..., d:]
        xp, vp = particles.x[..., :d], particles.x[..., d:]
        out = np.empty(query.x.shape[:-1] + (2 * d,))
        for s in range(0, x.shape[0], self.chunk):
            sl = slice(s, s + self.chunk)
            out[sl] = flocking_m4(x[sl], v[sl], xp[sl], vp[sl], self.beta, self.Q)
        return out

    # LQ (beta = 0) oracle --------------------------------------------------
    def eta(self, t):
        return riccati_eta(t, self.T, self.R, self.Q)

    def lq_oracle(self, t, v_t, w0_t, ev0=None):
        """(Y^2, Z^2, Z^{0,2}) of the LQ reduction at time t."""
        if self.beta != 0:
            raise UsageError("the LQ oracle exists only for beta = 0")
        ev0 = self.v0_mean if ev0 is None else ev0
        eta = np.asarray(self.eta(t))[..., None]
        y2 = eta * (np.asarray(v_t) - ev0 - np.asarray(w0_t) @ self.D.T)
        z2 = eta[..., None] * self.C
        z2 = np.broadcast_to(z2, np.shape(y2)[:-1] + self.C.shape)
        return y2, z2, np.zeros_like(z2)

    def closed_loop(self, drivers):
        """Euler simulation of the optimally controlled LQ state on ``drivers``."""
        if self.beta != 0:
            raise UsageError("the LQ oracle exists only for beta = 0")
        d, grid = self.d, drivers.grid
        n1 = drivers.N1
        B = drivers.N1 * drivers.N2
        dW = drivers.idio.reshape(B, grid.N_T, d)
        dW0 = np.repeat(drivers.common, n1, axis=0)
        W0 = np.repeat(drivers.common_at_coarse(), n1, axis=0)
        st = drivers.x0.reshape(B, 2 * d).copy()
        xs = [st.copy()]
        for i, t in enumerate(grid.times[:-1]):
            x, v = st[:, :d], st[:, d:]
            y2, _, _ = self.lq_oracle(t, v, W0[:, i])
            u = y2 @ (-0.5 * self.Rinv.T)
            st = np.concatenate([x + v * grid.dt,
                                 v + u * grid.dt + dW[:, i] @ self.C.T + dW0[:, i] @ self.D.T],
                                axis=1)
            xs.append(st.copy())
        return np.stack(xs), np.swapaxes(W0, 0, 1)

    def oracle(self, drivers):
        if self.beta != 0:
            return None
        d = self.d
        xs, w0 = self.closed_loop(drivers)
        t = drivers.grid.times
        y2, z2, z02 = self.lq_oracle(t[:, None], xs[..., d:], w0)
        zeros_y = np.zeros_like(y2)
        zeros_z = np.zeros_like(z2)
        return {"x": xs,
                "y": np.concatenate([zeros_y, y2], axis=-1),
                "z": np.concatenate([zeros_z, z2], axis=-2),
                "z0": np.concatenate([zeros_z, z02], axis=-2)}

    def lq_diagnostics(self, sim, drivers):
        """LQ consistency numbers for a simulation on ``drivers``.

        Returns ``y2_mee`` (learned Y^2 against the oracle evaluated on the
        simulated velocities), ``z0_norm`` (mean norm of the learned Z^{0,2})
        ``cond_mean_mee`` (per-path mean velocity against
        ``E[v_0] + D W^0_t``) and ``v_mee`` (learned velocities against the
        optimally controlled closed loop on the same drivers).
        """
        d = self.d
        n_t = len(drivers.grid.times)
        W0 = np.repeat(drivers.common_at_coarse(), drivers.N1, axis=0).swapaxes(0, 1)
        v = sim.x[..., d:]
        y2_ref, _, _ = self.lq_oracle(drivers.grid.times[:, None], v, W0)
        z0 = sim.z0[:, :, d:, :]
        vbar = v.reshape(n_t, drivers.N2, drivers.N1, d).mean(axis=2)
        target = self.v0_mean + drivers.common_at_coarse().swapaxes(0, 1) @ self.D.T
        return {
            "y2_mee": mee(np.swapaxes(sim.y[..., d:], 0, 1), np.swapaxes(y2_ref, 0, 1)),
            "z0_norm": float(np.linalg.norm(z0.reshape(z0.shape[0], z0.shape[1], -1),
                                            axis=-1).mean()),
            "cond_mean_mee": float(np.linalg.norm(vbar - target, axis=-1).mean()),
            "v_mee": mee(np.swapaxes(v, 0, 1), np.swapaxes(self.closed_loop(drivers)[0][..., d:],
                                                          0, 1)),
        }

    def terminal_velocities(self, problem, state, cfg, n_particles, path_index=0):
        """Terminal velocities ``[n_particles, d]`` of one held-out common path."""
        drv = generate_drivers(cfg.seed, cfg.grid, n_particles, 1, self.q, self.mu0,
                               purpose="eval", epoch=1 + path_index)
        feats = drv.signature_features(cfg.depth, cfg.feature)
        sim = simulate(problem, state.fields, state.embeds, drv, feats, stage=state.stage)
        return sim.x[-1][:, self.d:]

    def problem(self):
        return FbsdeProblem(
            name="flocking", d=2 * self.d, dy=2 * self.d, q=self.d, ell=self.ell, T=self.T,
            mu0=self.mu0, b=self.drift, sigma=self.vol, sigma0=self.vol0, h=self.driver,
            g=self.terminal, m_exact={4: self.m4_exact}, embed_state="x",
            oracle=self.oracle if self.beta == 0 else None)
