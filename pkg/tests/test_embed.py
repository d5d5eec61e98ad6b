import math

import numpy as np
import pytest

from sigfp import bench, embed
from sigfp import nnkit as nk
from sigfp.errors import ConfigError, TrainingError, UsageError
from sigfp.pathsim import TimeGrid, empirical_conditional, generate_drivers


def analytic_m1_by_hand(xq, parts_x, parts_y, d):
    n = len(parts_x)
    kern = sum(math.exp(-sum((xq[k] - px[k]) ** 2 for k in range(d)) / d) for px in parts_x) / n
    mx = [sum(px[k] for px in parts_x) / n for k in range(d)]
    my = sum(py[0] for py in parts_y) / n
    return [kern] + mx + [my]


@pytest.mark.parametrize("d,n", [(1, 2), (2, 3), (3, 1)])
def test_compute_targets_matches_hand_sums(d, n):
    b = bench.AnalyticMvFbsdeBench(d)
    rng = np.random.default_rng(d * 7 + n)
    x = rng.standard_normal((2, 2, n, d))
    y = rng.standard_normal((2, 2, n, 1))
    ens = empirical_conditional([0.0, 0.5], x, y)
    tg = embed.compute_targets(b.problem(), ens)[1]
    assert tg.shape == (1, 2, n, d + 2)
    for n2 in range(2):
        for k in range(n):
            want = analytic_m1_by_hand(x[0, n2, k], x[0, n2], y[0, n2], d)
            np.testing.assert_allclose(tg[0, n2, k], want, rtol=0, atol=1e-12)


def test_flocking_targets_match_hand_sums():
    from test_bench import m4_by_hand
    fb = bench.FlockingBench(beta=1.0)
    rng = np.random.default_rng(0)
    states = rng.standard_normal((3, 1, 3, 6))
    tg = embed.compute_targets(fb.problem(), empirical_conditional([0, 1, 2], states))[4]
    for i in range(2):
        parts = [(s[:3], s[3:]) for s in states[i, 0]]
        for k in range(3):
            want = m4_by_hand(states[i, 0, k, :3], states[i, 0, k, 3:], parts, 1.0,
                              fb.Q.tolist())
            np.testing.assert_allclose(tg[i, 0, k], want, rtol=0, atol=1e-12)


def test_targets_are_permutation_equivariant():
    b = bench.AnalyticMvFbsdeBench(2)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 2, 5, 2))
    y = rng.standard_normal((3, 2, 5, 1))
    perm = rng.permutation(5)
    a = embed.compute_targets(b.problem(), empirical_conditional([0, 1, 2], x, y))[1]
    p = embed.compute_targets(b.problem(),
                              empirical_conditional([0, 1, 2], x[:, :, perm], y[:, :, perm]))[1]
    np.testing.assert_allclose(p, a[:, :, perm], atol=1e-14)


def test_target_width_is_checked():
    b = bench.AnalyticMvFbsdeBench(1)
    prob = b.problem()
    prob.ell = 5
    ens = empirical_conditional([0, 1], np.zeros((2, 1, 2, 1)), np.zeros((2, 1, 2, 1)))
    with pytest.raises(ConfigError):
        embed.compute_targets(prob, ens)


def test_linear_variant_is_contraction_with_features():
    rng = np.random.default_rng(2)
    arch = embed.EmbedArch.create("linear", "sig", 2, 1, 2, 3, hidden=(8,), rng=rng,
                                  zero_output=False)
    F = arch.n_features
    assert F == 7
    state = rng.standard_normal((4, 2))
    feats = rng.standard_normal((4, F))
    out = arch(0.3, state, feats).data
    coef = arch.net(np.concatenate([np.full((4, 1), 0.3), state], axis=1)).data
    want = np.einsum("nlf,nf->nl", coef.reshape(4, 3, F), feats)
    np.testing.assert_allclose(out, want, atol=1e-14)


def test_direct_variant_and_errors():
    rng = np.random.default_rng(3)
    arch = embed.EmbedArch.create("direct", "logsig", 2, 1, 1, 2, hidden=(8,), rng=rng)
    # full tensor coordinates: levels 1 and 2 of the 2-dim augmented path
    assert arch.n_features == 2 + 4
    assert arch.net.input_dim == 1 + 1 + 6
    np.testing.assert_array_equal(arch(0.0, np.zeros((3, 1)), np.zeros((3, 6))).data, 0.0)
    with pytest.raises(UsageError):
        arch(0.0, np.zeros((3, 1)), np.zeros((3, 5)))
    with pytest.raises(ConfigError):
        embed.EmbedArch.create("bogus", "sig", 2, 1, 1, 1)
    net = nk.MLP.create(3, (4,), 1)
    with pytest.raises(ConfigError):
        embed.EmbedArch(net, "direct", "sig", 2, 1, 1, 1)


def _toy_data(rng, n=512):
    t = rng.uniform(0, 1, (n, 1))
    x = rng.standard_normal((n, 1))
    f = rng.standard_normal((n, 6))
    y = np.sin(x) + 0.5 * f[:, 1:2] * t
    return embed.EmbedData(t, x, f, y)


def test_train_embed_reduces_loss():
    rng = np.random.default_rng(4)
    data = _toy_data(rng)
    arch = embed.EmbedArch.create("direct", "logsig", 2, 1, 1, 1, hidden=(16, 16), rng=rng)
    before = embed.evaluate_loss(arch, data)
    trace = embed.train_embed(arch, data, nk.LrSchedule(1e-2), 300, batch_size=128, rng=rng)
    assert len(trace) == 300
    assert embed.evaluate_loss(arch, data) < 0.2 * before


def test_train_embed_divergence_rule():
    rng = np.random.default_rng(5)
    data = _toy_data(rng)
    arch = embed.EmbedArch.create("linear", "logsig", 2, 1, 1, 1, hidden=(16,), rng=rng,
                                  zero_output=False)
    with pytest.raises(TrainingError) as info:
        embed.train_embed(arch, data, nk.LrSchedule(50.0), 400, patience=20, stage=3)
    assert info.value.stage == 3 and info.value.trace


def test_data_alignment_is_checked():
    with pytest.raises(UsageError):
        embed.EmbedData(np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((2, 4)), np.zeros((2, 1)))


def test_mae_at_time_for_zero_network():
    rng = np.random.default_rng(6)
    arch = embed.EmbedArch.create("direct", "logsig", 2, 1, 1, 1, hidden=(4,), rng=rng)
    exact = rng.standard_normal((10, 3, 1))
    mae = embed.mae_at_time(arch, np.array([0.0, 0.5, 1.0]), rng.standard_normal((10, 3, 1)),
                            rng.standard_normal((10, 3, 6)), exact)
    np.testing.assert_allclose(mae, np.abs(exact[..., 0]).mean(axis=0), atol=1e-15)


def _mean_dataset(kb, seed, epoch, grid, N1, N2):
    drv = generate_drivers(seed, grid, N1, N2, 1, lambda r, n: np.zeros((n, 1)),
                           purpose="embed", epoch=epoch)
    feats = drv.signature_features(2, "logsig")
    x = kb.states(drv)[:-1]
    n_t = x.shape[0]
    target = np.broadcast_to(x.mean(axis=2, keepdims=True), x.shape)
    t = np.repeat(grid.times[:n_t], N1 * N2)[:, None]
    f = np.repeat(feats[:n_t], N1, axis=1)
    return embed.EmbedData(t, x.reshape(-1, 1), f.reshape(n_t * N1 * N2, -1),
                           target.reshape(-1, 1))


def test_linear_functional_target_is_recovered_by_archi1():
    # E[x' | F0] = W0_t, the first path coordinate of the level-1 log-signature
    kb = bench.GaussianKernelBench(1)
    grid = TimeGrid(1.0, 40, 4)
    rng = np.random.default_rng(0)
    arch = embed.EmbedArch.create("linear", "logsig", 2, 1, 1, 1, hidden=(16,), rng=rng)
    opt = nk.Adam(arch.net.parameters())
    sched = nk.LrSchedule(3e-3, 0.95, 100, decay_until=5000)
    for epoch in range(20):
        embed.train_embed(arch, _mean_dataset(kb, 0, epoch, grid, 256, 64), sched, 50, 1024,
                          rng, opt=opt, step0=50 * epoch)
    drv = generate_drivers(0, grid, 1, 1000, 1, lambda r, n: np.zeros((n, 1)), purpose="eval")
    x = kb.states(drv)[:, :, 0].swapaxes(0, 1)
    feats = drv.signature_features(2, "logsig").swapaxes(0, 1)
    mae = embed.mae_at_time(arch, grid.times, x, feats, drv.common_at_coarse())
    assert mae.mean() <= 1e-2


def test_shuffling_features_across_paths_hurts():
    kb = bench.GaussianKernelBench(1)
    cfg = bench.KernelExperiment(epochs=10, hidden=(32, 32), eval_J=400)
    arch, curve, _ = bench.run_kernel_experiment(kb, cfg)
    drv = generate_drivers(5, cfg.grid, 1, 400, 1, lambda r, n: np.zeros((n, 1)),
                           purpose="eval")
    x = kb.states(drv)[:, :, 0].swapaxes(0, 1)
    feats = drv.signature_features(2, "logsig").swapaxes(0, 1)
    exact = kb.closed_form(cfg.grid.times[None, :], x, drv.common_at_coarse())[..., None]
    paired = embed.mae_at_time(arch, cfg.grid.times, x, feats, exact).mean()
    perm = np.random.default_rng(1).permutation(400)
    shuffled = embed.mae_at_time(arch, cfg.grid.times, x, feats[perm], exact).mean()
    assert shuffled > paired
