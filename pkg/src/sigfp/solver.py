"""Conditional FBSDE simulation, deep-BSDE training and fictitious play.

Batch layout: particles are flattened ``n2``-major, i.e. row
``n2 * N1 + n1``.  Z-type outputs of the decoupling networks are reshaped
row-major to ``[B, dy, q]``.
"""

from __future__ import annotations

import contextlib
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nnkit as nk
from . import pathsim
from .embed import EmbedArch, EmbedData, compute_targets, evaluate_loss, train_embed
from .errors import ConfigError, SimulationError, TrainingError
from .metrics import mee
from .pathsim import TimeGrid, empirical_conditional, generate_drivers
from .sigkit import feature_dim

log = logging.getLogger(__name__)


@dataclass
class FbsdeProblem:
    """Coefficients of one conditional MV-FBSDE.

    ``b(t, x, y, z, z0, m1)`` and ``h(t, x, y, z, z0, m4)`` return ``[B, d]``
    and ``[B, dy]`` tensors; ``sigma``/``sigma0(t, x, y, z, m)`` return a
    constant ``[d, q]`` array or a ``[B, d, q]`` tensor; ``g(x, m5)`` returns
    ``[B, dy]``.  ``m_exact`` maps the index of every non-zero embedding to
    ``fn(t, query, particles) -> [N2, N1, ell]`` where ``query`` and
    ``particles`` are :class:`~sigfp.embed.Theta` bundles of
    ``[N2, N1, ...]`` arrays.  Embeddings absent from ``m_exact`` are
    identically zero.
    """

    name: str
    d: int
    dy: int
    q: int
    ell: int
    T: float
    mu0: Callable
    b: Callable
    sigma: Callable
    sigma0: Callable
    h: Callable
    g: Callable
    m_exact: dict
    embed_state: str = "x"
    oracle: Callable | None = None

    @property
    def zero_embeddings(self):
        return tuple(i for i in range(1, 6) if i not in self.m_exact)

    def embed_state_dim(self):
        if self.embed_state == "x":
            return self.d
        return self.d + self.dy + self.dy * self.q


@dataclass
class DecouplingFields:
    u: nk.MLP
    v: nk.MLP
    v0: nk.MLP

    @classmethod
    def create(cls, problem, n_features, u_hidden=(64, 64), z_hidden=(64, 64),
               activation="tanh", rng=None, zero_z=True):
        """``zero_z`` zeroes the output layers of v and v0 so Z starts at 0."""
        rng = np.random.default_rng(0) if rng is None else rng
        zin = 1 + problem.d + n_features
        zout = problem.dy * problem.q
        return cls(nk.MLP.create(problem.d, u_hidden, problem.dy, activation, rng),
                   nk.MLP.create(zin, z_hidden, zout, activation, rng, zero_output=zero_z),
                   nk.MLP.create(zin, z_hidden, zout, activation, rng, zero_output=zero_z))

    def parameters(self):
        return self.u.parameters() + self.v.parameters() + self.v0.parameters()

    def copy(self):
        return DecouplingFields(self.u.copy(), self.v.copy(), self.v0.copy())

    def set_trainable(self, flag):
        for net in (self.u, self.v, self.v0):
            net.set_trainable(flag)

    def fingerprint(self):
        return "".join(n.fingerprint() for n in (self.u, self.v, self.v0))

    def nets(self):
        return {"u": self.u, "v": self.v, "v0": self.v0}


@dataclass
class SimOutput:
    """Trajectories on the coarse grid; arrays are ``[n_t, B, ...]``."""

    times: np.ndarray
    N1: int
    N2: int
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    z0: np.ndarray
    mismatch: np.ndarray
    mismatch_t: nk.Tensor | None = None

    def ensemble(self):
        n_t = len(self.times)

        def grp(a):
            return a.reshape(a.shape[0], self.N2, self.N1, *a.shape[2:])

        # Z is only produced at t_0..t_{N_T-1}; repeat the last node so the
        # ensemble has a uniform time axis.
        z = np.concatenate([self.z, self.z[-1:]], axis=0)
        z = z.reshape(n_t, self.N2, self.N1, -1)
        return empirical_conditional(self.times, grp(self.x), grp(self.y), z)


def _apply_vol(vol, dw):
    if isinstance(vol, nk.Tensor):
        return nk.matvec(vol, dw)
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim == 2:
        return nk.Tensor(dw @ vol.T)
    return nk.Tensor(np.einsum("bij,bj->bi", vol, dw))


def embed_state(problem, x, y, z):
    if problem.embed_state == "x":
        return x
    n = x.shape[0]
    return nk.concat([x, y, z.reshape(n, problem.dy * problem.q)], axis=1)


def _zero_m(n, ell):
    return nk.Tensor(np.zeros((n, ell)))


def simulate(problem, fields, embeds, drivers, feats, record=False, stage=None):
    """Euler forward shooting of (X, Y) under frozen embeddings.

    ``feats`` holds the common-path features per coarse node,
    ``[N_T + 1, N2, F]``.  With ``record`` the terminal mismatch keeps its
    autodiff graph (for :func:`bsde_loss`).
    """
    grid = drivers.grid
    N1, N2, q = drivers.N1, drivers.N2, drivers.q
    B = N1 * N2
    d, dy, dt = problem.d, problem.dy, grid.dt
    times = grid.times
    dW = drivers.idio.reshape(B, grid.N_T, q)
    dW0 = np.repeat(drivers.common, N1, axis=0)
    feat_b = np.repeat(feats, N1, axis=1)

    xs, ys, zs, z0s = [], [], [], []
    ctx = nk.no_grad() if not record else contextlib.nullcontext()
    with ctx:
        x = nk.Tensor(drivers.x0.reshape(B, d))
        y = fields.u(x)
        for i in range(grid.N_T):
            t = times[i]
            f_i = feat_b[i]
            inp = nk.concat([nk.Tensor(np.full((B, 1), t)), x, nk.Tensor(f_i)], axis=1)
            z = fields.v(inp).reshape(B, dy, q)
            z0 = fields.v0(inp).reshape(B, dy, q)
            xs.append(x.data)
            ys.append(y.data)
            zs.append(z.data)
            z0s.append(z0.data)
            st = embed_state(problem, x, y, z) if embeds else None
            m = {k: (embeds[k](t, st, f_i) if k in embeds else _zero_m(B, problem.ell))
                 for k in (1, 2, 3, 4)}
            drift = problem.b(t, x, y, z, z0, m[1])
            vol = problem.sigma(t, x, y, z, m[2])
            vol0 = problem.sigma0(t, x, y, z, m[3])
            hv = problem.h(t, x, y, z, z0, m[4])
            x_new = x + drift * dt + _apply_vol(vol, dW[:, i]) + _apply_vol(vol0, dW0[:, i])
            y = y - hv * dt + nk.matvec(z, dW[:, i]) + nk.matvec(z0, dW0[:, i])
            x = x_new
            _check_finite(x.data, y.data, i + 1, N1, stage)
        xs.append(x.data)
        ys.append(y.data)
        m5 = embeds[5](times[-1], x, feat_b[-1]) if 5 in embeds else _zero_m(B, problem.ell)
        mismatch = problem.g(x, m5) - y
    return SimOutput(times, N1, N2, np.stack(xs), np.stack(ys), np.stack(zs), np.stack(z0s),
                     mismatch.data, mismatch if record else None)


def _check_finite(x, y, i, N1, stage):
    ok = np.isfinite(x).all(axis=1) & np.isfinite(y).all(axis=1)
    if not ok.all():
        b = int(np.argmin(ok))
        raise SimulationError("non-finite state", stage=stage, time_index=i,
                              n1=b % N1, n2=b // N1)


def bsde_loss(sim):
    """Mean over particles of the squared terminal mismatch (a tensor)."""
    if sim.mismatch_t is None:
        raise ConfigError("simulation was not recorded; pass record=True")
    r = sim.mismatch_t
    return (r * r).sum(axis=1).mean()


@dataclass
class FpConfig:
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(1.0, 40, 4))
    N1: int = 64
    N2: int = 16
    stages: int = 10
    depth: int = 2
    feature: str = "logsig"
    variant: str = "direct"
    embed_hidden: tuple = (32, 32)
    embed_activation: str = "silu"
    u_hidden: tuple = (32, 32)
    z_hidden: tuple = (32, 32)
    field_activation: str = "tanh"
    embed_steps: int = 200
    embed_batch: int | None = 4096
    embed_schedule: nk.LrSchedule = field(
        default_factory=lambda: nk.LrSchedule(3e-3, 0.8, 100, 0.95))
    bsde_steps: int = 200
    bsde_N1: int = 16
    bsde_N2: int = 16
    bsde_schedule: nk.LrSchedule = field(
        default_factory=lambda: nk.LrSchedule(3e-3, 0.2, milestones=(100, 160),
                                               stage_factor=0.85))
    regen_every: int = 20
    eval_N1: int = 64
    eval_N2: int = 16
    seed: int = 0


@dataclass
class StageRecord:
    stage: int
    embed_loss: float
    bsde_loss: float
    mee: dict
    wall_seconds: float
    embed_trace: list = field(default_factory=list)
    bsde_trace: list = field(default_factory=list)
    embed_fingerprint: str = ""
    field_fingerprint: str = ""


@dataclass
class FpState:
    stage: int
    embeds: dict
    fields: DecouplingFields
    history: list = field(default_factory=list)


def init_state(problem, cfg):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(101,)))
    F = feature_dim(problem.q, cfg.depth, cfg.feature)
    fields = DecouplingFields.create(problem, F, cfg.u_hidden, cfg.z_hidden,
                                     cfg.field_activation, rng)
    embeds = {}
    for i in sorted(problem.m_exact):
        embeds[i] = EmbedArch.create(
            cfg.variant, cfg.feature, cfg.depth, problem.q,
            problem.d if i == 5 else problem.embed_state_dim(), problem.ell,
            cfg.embed_hidden, cfg.embed_activation, rng, with_time=(i != 5))
    return FpState(0, embeds, fields)


def embed_dataset(problem, sim, feats, targets, i):
    """Flatten simulated states and targets into a Step-2 training set."""
    N_T = len(sim.times) - 1
    N1 = sim.N1
    feat_b = np.repeat(feats, N1, axis=1)
    if i == 5:
        return EmbedData(np.full((sim.x.shape[1], 1), sim.times[-1]), sim.x[-1], feat_b[-1],
                         targets.reshape(-1, problem.ell))
    B = sim.x.shape[1]
    t = np.repeat(sim.times[:N_T], B)[:, None]
    if problem.embed_state == "x":
        st = sim.x[:N_T]
    else:
        st = np.concatenate([sim.x[:N_T], sim.y[:N_T], sim.z.reshape(N_T, B, -1)], axis=2)
    return EmbedData(t, st.reshape(N_T * B, -1), feat_b[:N_T].reshape(N_T * B, -1),
                     targets.reshape(N_T * B, problem.ell))


def step_drivers(problem, cfg, N1, N2, purpose, epoch):
    drv = generate_drivers(cfg.seed, cfg.grid, N1, N2, problem.q, problem.mu0,
                           purpose=purpose, epoch=epoch)
    return drv, drv.signature_features(cfg.depth, cfg.feature)


def train_bsde(problem, fields, embeds, cfg, stage=0, steps=None):
    """Adam on the terminal mismatch with frozen embeddings; returns the loss trace."""
    steps = cfg.bsde_steps if steps is None else steps
    for e in embeds.values():
        e.net.set_trainable(False)
    fields.set_trainable(True)
    opt = nk.Adam(fields.parameters())
    trace = []
    initial = None
    bad = 0
    drv = feats = None
    for step in range(steps):
        if step % cfg.regen_every == 0:
            drv, feats = step_drivers(problem, cfg, cfg.bsde_N1, cfg.bsde_N2, "step3",
                                      stage * 100_000 + step // cfg.regen_every)
        sim = simulate(problem, fields, embeds, drv, feats, record=True, stage=stage)
        loss = bsde_loss(sim)
        opt.zero_grad()
        nk.backprop(loss)
        lv = float(loss.data)
        trace.append(lv)
        if initial is None:
            initial = lv
        bad = bad + 1 if lv > 10 * max(initial, 1e-300) else 0
        if bad >= 100:
            raise TrainingError("deep-BSDE training diverged", stage=stage, step=step,
                                trace=trace)
        opt.step(cfg.bsde_schedule.rate(step, stage), stage=stage)
    fields.set_trainable(False)
    return trace


def evaluate(problem, state, cfg, drivers=None):
    """Simulate on held-out drivers and compare with the oracle, if any."""
    if drivers is None:
        drv, feats = step_drivers(problem, cfg, cfg.eval_N1, cfg.eval_N2, "eval", 0)
    else:
        drv, feats = drivers
    sim = simulate(problem, state.fields, state.embeds, drv, feats, stage=state.stage)
    out = {"sim": sim, "drivers": drv, "feats": feats}
    if problem.oracle is not None:
        ref = problem.oracle(drv)
        out["ref"] = ref
        n_z = sim.z.shape[0]
        out["mee"] = {
            "x": mee(np.swapaxes(sim.x, 0, 1), np.swapaxes(ref["x"], 0, 1)),
            "y": mee(np.swapaxes(sim.y, 0, 1), np.swapaxes(ref["y"], 0, 1)),
            "z": mee(np.swapaxes(sim.z, 0, 1), np.swapaxes(ref["z"][:n_z], 0, 1)),
            "z0": mee(np.swapaxes(sim.z0, 0, 1), np.swapaxes(ref["z0"][:n_z], 0, 1)),
        }
    return out


def run_stage(problem, state, cfg):
    """One fictitious-play stage: simulate, fit embeddings, refit fields."""
    k = state.stage + 1
    t0 = time.perf_counter()
    embeds_prev = state.embeds
    fields_prev = state.fields
    field_fp = fields_prev.fingerprint()

    embeds = {i: e.copy() for i, e in embeds_prev.items()}
    embed_losses, embed_trace = [], []
    if embeds:
        drv, feats = step_drivers(problem, cfg, cfg.N1, cfg.N2, "step1", k)
        sim = simulate(problem, fields_prev, embeds_prev, drv, feats, stage=k)
        targets = compute_targets(problem, sim.ensemble())
        rng = pathsim.stream(cfg.seed, "embed", k, 2)
        for i, arch in embeds.items():
            arch.net.set_trainable(True)
            data = embed_dataset(problem, sim, feats, targets[i], i)
            trace = train_embed(arch, data, cfg.embed_schedule, cfg.embed_steps,
                                cfg.embed_batch, rng, stage=k)
            arch.net.set_trainable(False)
            embed_trace.extend(trace)
            embed_losses.append(evaluate_loss(arch, data))
    # Step 2 must not touch the previous fields.
    assert fields_prev.fingerprint() == field_fp
    embed_fp = "".join(e.net.fingerprint() for e in embeds.values())

    fields = fields_prev.copy()
    bsde_trace = train_bsde(problem, fields, embeds, cfg, stage=k)
    assert "".join(e.net.fingerprint() for e in embeds.values()) == embed_fp

    new = FpState(k, embeds, fields, state.history)
    ev = evaluate(problem, new, cfg)
    rec = StageRecord(
        stage=k,
        embed_loss=float(np.mean(embed_losses)) if embed_losses else 0.0,
        bsde_loss=float(np.mean(bsde_trace[-max(1, cfg.regen_every):])),
        mee=ev.get("mee", {}),
        wall_seconds=time.perf_counter() - t0,
        embed_trace=embed_trace,
        bsde_trace=bsde_trace,
        embed_fingerprint=embed_fp,
        field_fingerprint=fields.fingerprint(),
    )
    new.history = state.history + [rec]
    log.info("stage %d: embed %.3e bsde %.3e mee %s (%.1fs)", k, rec.embed_loss,
             rec.bsde_loss, {n: f"{v:.3e}" for n, v in rec.mee.items()}, rec.wall_seconds)
    return new


def fictitious_play(problem, cfg, state=None, on_stage=None):
    """Run ``cfg.stages`` stages; ``on_stage(state)`` is called after each."""
    state = init_state(problem, cfg) if state is None else state
    while state.stage < cfg.stages:
        try:
            state = run_stage(problem, state, cfg)
        except (TrainingError, SimulationError) as exc:
            exc.seed = cfg.seed
            raise
        if on_stage is not None:
            on_stage(state)
    return state


def save_checkpoint(root, state):
    """Write ``root/stage_k/{u,v,v0,m1..m5}.npz``."""
    d = os.path.join(root, f"stage_{state.stage}")
    os.makedirs(d, exist_ok=True)
    for name, net in state.fields.nets().items():
        nk.save_params(os.path.join(d, f"{name}.npz"), net)
    for i, arch in state.embeds.items():
        nk.save_params(os.path.join(d, f"m{i}.npz"), arch.net)
    return d
