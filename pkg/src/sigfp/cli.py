"""Command-line entry point: run, preset-dump, sig-tool, validate.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
Only two environment variables are honoured: ``SIGFP_OUTPUT_DIR`` replaces
the configured output directory and ``SIGFP_THREADS`` the thread count.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("sigfp")


def _pin_threads(n):
    """Must run before numpy is first imported to have any effect."""
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(n))


def _peek_threads(path):
    env = os.environ.get("SIGFP_THREADS")
    if env:
        return env
    try:
        import yaml
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        return str(int(data.get("threads", 1)))
    except Exception:
        return "1"


# --------------------------------------------------------------------------
# Experiment orchestration
# --------------------------------------------------------------------------
def build_bench(cfg):
    from . import bench
    if cfg.benchmark == "gaussian-kernel":
        return bench.GaussianKernelBench(cfg.d)
    if cfg.benchmark == "analytic-mvfbsde":
        return bench.AnalyticMvFbsdeBench(cfg.d, cfg.grid.T)
    f = cfg.flocking
    return bench.FlockingBench(d=cfg.d, beta=f.beta, C=f.C, D=f.D, R=f.R, Q=f.Q, T=cfg.grid.T)


def fp_config(cfg, seed):
    from .solver import FpConfig
    n = cfg.network
    return FpConfig(
        grid=cfg.time_grid(), N1=cfg.N1, N2=cfg.N2, stages=cfg.stages,
        depth=cfg.signature.depth, feature=cfg.signature.feature, variant=n.variant,
        embed_hidden=tuple(n.embed_hidden), embed_activation=n.embed_activation,
        u_hidden=tuple(n.u_hidden), z_hidden=tuple(n.z_hidden),
        field_activation=n.field_activation,
        embed_steps=cfg.embed.steps, embed_batch=cfg.embed.batch,
        embed_schedule=cfg.embed.schedule.build(),
        bsde_steps=cfg.bsde.steps, bsde_N1=cfg.bsde.N1, bsde_N2=cfg.bsde.N2,
        bsde_schedule=cfg.bsde.schedule.build(), regen_every=cfg.bsde.regen_every,
        eval_N1=cfg.eval.N1, eval_N2=cfg.eval.N2, seed=seed)


def kernel_config(cfg, seed):
    from .bench import KernelExperiment
    k = cfg.kernel
    return KernelExperiment(
        q=cfg.d, grid=cfg.time_grid(), N1=cfg.N1, N2=cfg.N2, epochs=k.epochs,
        steps_per_epoch=k.steps_per_epoch, batch=k.batch, depth=cfg.signature.depth,
        feature=cfg.signature.feature, variant=cfg.network.variant,
        hidden=tuple(cfg.network.embed_hidden), activation=cfg.network.embed_activation,
        schedule=cfg.embed.schedule.build(), eval_J=k.eval_J, seed=seed)


STAGE_HEADER = ["stage", "embed_loss", "bsde_loss", "mee_x", "mee_y", "mee_z", "mee_z0", "seed"]


class RunWriter:
    """Accumulates rows and writes every CSV of a run directory."""

    def __init__(self, run_dir):
        self.run_dir = run_dir
        self.tables = {}

    def add(self, name, header, rows):
        tab = self.tables.setdefault(name, (header, []))
        tab[1].extend(rows)

    def flush(self):
        from .metrics import write_csv
        for name, (header, rows) in self.tables.items():
            write_csv(os.path.join(self.run_dir, name), header, rows)


def _per_time_rows(run_id, seed, stage, sim, ref):
    from .metrics import MetricRow, mee
    rows = []
    n_z = sim.z.shape[0]
    pairs = {"x": (sim.x, ref["x"]), "y": (sim.y, ref["y"]),
             "z": (sim.z, ref["z"][:n_z]), "z0": (sim.z0, ref["z0"][:n_z])}
    for name, (a, b) in pairs.items():
        curve = mee(a.swapaxes(0, 1), b.swapaxes(0, 1), per_time=True)
        rows += [MetricRow(run_id, seed, stage, f"mee_{name}", i, float(v)).as_list()
                 for i, v in enumerate(curve)]
    return rows


def _trajectory_rows(seed, sim, ref, n_show=4):
    rows = []
    times = sim.times
    n_show = min(n_show, sim.x.shape[1])
    for p in range(n_show):
        for name in ("x", "y"):
            learned = getattr(sim, name)
            for i, t in enumerate(times):
                for c in range(learned.shape[-1]):
                    oracle = "" if ref is None else float(ref[name][i, p, c])
                    rows.append([seed, p, i, float(t), f"{name}{c}", float(learned[i, p, c]),
                                 oracle])
    return rows


def _density_rows(seed, vT, bins=30):
    import numpy as np
    rows = []
    for c in range(vT.shape[1]):
        dens, edges = np.histogram(vT[:, c], bins=bins, density=True)
        rows += [[seed, c, float(edges[j]), float(edges[j + 1]), float(dens[j])]
                 for j in range(bins)]
    return rows


def run_fictitious_play(cfg, run_dir, writer, seed):
    from . import solver
    b = build_bench(cfg)
    problem = b.problem()
    fcfg = fp_config(cfg, seed)
    run_id = f"seed{seed}"
    ckpt_root = os.path.join(run_dir, run_id)

    def on_stage(state):
        rec = state.history[-1]
        solver.save_checkpoint(ckpt_root, state)
        m = rec.mee
        writer.add("metrics.csv", STAGE_HEADER,
                   [[rec.stage, rec.embed_loss, rec.bsde_loss, m.get("x", ""), m.get("y", ""),
                     m.get("z", ""), m.get("z0", ""), seed]])
        writer.add("timing.csv", ["seed", "stage", "wall_seconds"],
                   [[seed, rec.stage, round(rec.wall_seconds, 3)]])
        trace = [[seed, rec.stage, "embed", i, v] for i, v in enumerate(rec.embed_trace)]
        trace += [[seed, rec.stage, "bsde", i, v] for i, v in enumerate(rec.bsde_trace)]
        writer.add("loss_trace.csv", ["seed", "stage", "kind", "step", "loss"], trace)
        writer.flush()

    state = solver.fictitious_play(problem, fcfg, on_stage=on_stage)
    ev = solver.evaluate(problem, state, fcfg)
    ref = ev.get("ref")
    if ref is not None:
        writer.add("mee_curve.csv", ["run_id", "seed", "stage", "metric", "time_index", "value"],
                   _per_time_rows(run_id, seed, state.stage, ev["sim"], ref))
    writer.add("trajectories.csv",
               ["seed", "particle", "time_index", "t", "component", "learned", "oracle"],
               _trajectory_rows(seed, ev["sim"], ref))
    if cfg.benchmark == "flocking":
        vT = b.terminal_velocities(problem, state, fcfg, cfg.flocking.density_particles)
        writer.add("density.csv", ["seed", "coord", "bin_lo", "bin_hi", "density"],
                   _density_rows(seed, vT))
        if cfg.flocking.beta == 0:
            diag = b.lq_diagnostics(ev["sim"], ev["drivers"])
            keys = ["y2_mee", "z0_norm", "cond_mean_mee", "v_mee"]
            writer.add("lq_metrics.csv", ["seed"] + keys, [[seed] + [diag[k] for k in keys]])
    writer.flush()
    return state


def run_kernel(cfg, run_dir, writer, seed):
    from . import nnkit as nk
    from .bench import run_kernel_experiment
    from .metrics import MetricRow
    b = build_bench(cfg)
    t0 = time.perf_counter()
    arch, curve, trace = run_kernel_experiment(b, kernel_config(cfg, seed))
    run_id = f"seed{seed}"
    os.makedirs(os.path.join(run_dir, run_id, "stage_1"), exist_ok=True)
    nk.save_params(os.path.join(run_dir, run_id, "stage_1", "m1.npz"), arch.net)
    times = cfg.time_grid().times
    writer.add("mae_curve.csv", ["seed", "time_index", "t", "mae"],
               [[seed, i, float(t), float(v)] for i, (t, v) in enumerate(zip(times, curve))])
    writer.add("metrics.csv", ["run_id", "seed", "stage", "metric", "time_index", "value"],
               [MetricRow(run_id, seed, 1, "mae_mean", None, float(curve.mean())).as_list(),
                MetricRow(run_id, seed, 1, "final_loss", None, float(trace[-1])).as_list()])
    writer.add("loss_trace.csv", ["seed", "step", "loss"],
               [[seed, i, v] for i, v in enumerate(trace)])
    writer.add("timing.csv", ["seed", "wall_seconds"],
               [[seed, round(time.perf_counter() - t0, 3)]])
    writer.flush()


def execute(cfg, run_dir):
    """Run every seed of ``cfg`` into ``run_dir``; returns the run directory."""
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.yaml"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dump())
    writer = RunWriter(run_dir)
    for seed in cfg.seeds:
        if cfg.benchmark == "gaussian-kernel":
            run_kernel(cfg, run_dir, writer, seed)
        else:
            run_fictitious_play(cfg, run_dir, writer, seed)
    return run_dir


def _error_manifest(run_dir, exc):
    info = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("seed", "stage", "step", "time_index", "n1", "n2"):
        if getattr(exc, attr, None) is not None:
            info[attr] = getattr(exc, attr)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "error.json"), "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# sig-tool
# --------------------------------------------------------------------------
def read_path_csv(path):
    """Read ``t, v1, ..., vk`` rows (header required); returns (times, values)."""
    import csv

    import numpy as np

    from .errors import DataError
    times, values = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("empty file, expected a header row", line=1)
        width = len(header)
        if width < 2:
            raise DataError("header needs a time column and at least one value column", line=1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"expected {width} fields, found {len(row)}", line=line)
            try:
                nums = [float(v) for v in row]
            except ValueError:
                raise DataError(f"non-numeric field in {row!r}", line=line) from None
            if not all(np.isfinite(nums)):
                raise DataError("non-finite value", line=line)
            if times and nums[0] <= times[-1]:
                raise DataError(f"time {nums[0]} is not after {times[-1]}", line=line)
            times.append(nums[0])
            values.append(nums[1:])
    if not times:
        raise DataError("no data rows", line=2)
    return np.asarray(times), np.asarray(values)


def sig_tool(inp, out, depth, feature, augment=False):
    from . import sigkit
    from .metrics import write_csv
    times, values = read_path_csv(inp)
    path = sigkit.AugPath(times, values, augmented=augment)
    feats = sigkit.features(sigkit.prefix_signatures(path, depth), feature)
    header = ["t"] + [f"f{j}" for j in range(feats.shape[-1])]
    rows = [[float(t)] + [float(v) for v in f] for t, f in zip(times, feats)]
    if out is None or out == "-":
        import csv
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) for v in r])
    else:
        write_csv(out, header, rows)


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------
def _parser():
    p = argparse.ArgumentParser(prog="sigfp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a config file or preset")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("config", nargs="?", help="YAML config file")
    src.add_argument("--preset", help="name of a shipped preset")
    r.add_argument("--seed", type=int, action="append",
                   help="override the seed list (repeatable)")
    r.add_argument("--output-dir", help="parent directory for the run directory")
    r.add_argument("--dry-run", action="store_true",
                   help="print the resolved config and exit without writing anything")

    d = sub.add_parser("preset-dump", help="print presets as YAML")
    d.add_argument("name", nargs="?", help="preset name (default: list all)")

    s = sub.add_parser("sig-tool", help="signature features of every prefix of a CSV path")
    s.add_argument("input", help="CSV with header; columns t, v1, ..., vk")
    s.add_argument("-o", "--output", help="output CSV (default stdout)")
    s.add_argument("-M", "--depth", type=int, default=2)
    s.add_argument("--feature", choices=("sig", "logsig"), default="sig")
    s.add_argument("--augment", action="store_true", help="prepend time as a channel")

    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("config")
    return p


def _resolve(args):
    from . import config as C
    cfg = C.preset(args.preset) if args.preset else C.load_config(args.config)
    changes = {}
    if args.seed:
        changes["seeds"] = list(args.seed)
    out = args.output_dir or os.environ.get("SIGFP_OUTPUT_DIR")
    if out:
        changes["output_dir"] = out
    threads = os.environ.get("SIGFP_THREADS")
    if threads:
        try:
            changes["threads"] = int(threads)
        except ValueError:
            from .errors import ConfigError
            raise ConfigError(f"SIGFP_THREADS must be an integer, got {threads!r}") from None
    return C.override(cfg, **changes) if changes else cfg


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "run":
        _pin_threads(_peek_threads(args.config) if args.config else
                     os.environ.get("SIGFP_THREADS", "1"))
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    from .errors import ConfigError, DataError, SigFPError, UsageError

    try:
        if args.command == "validate":
            from .config import load_config
            load_config(args.config)
            print(f"{args.config}: ok")
            return EXIT_OK
        if args.command == "preset-dump":
            from .config import PRESETS, preset
            names = [args.name] if args.name else list(PRESETS)
            resolved = [preset(n) for n in names]
            for i, (n, cfg) in enumerate(zip(names, resolved)):
                if i:
                    print("---")
                print(f"# preset: {n}")
                print(cfg.dump(), end="")
            return EXIT_OK
        if args.command == "sig-tool":
            if args.depth < 1:
                raise ConfigError("must be >= 1", field="depth")
            sig_tool(args.input, args.output, args.depth, args.feature, args.augment)
            return EXIT_OK
        cfg = _resolve(args)
    except (ConfigError, DataError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    run_dir = os.path.join(cfg.output_dir, cfg.name)
    if args.dry_run:
        print(f"# run directory: {run_dir}")
        print(cfg.dump(), end="")
        return EXIT_OK
    try:
        execute(cfg, run_dir)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SigFPError, FloatingPointError, MemoryError) as exc:
        _error_manifest(run_dir, exc)
        print(f"run failed: {exc} (see {os.path.join(run_dir, 'error.json')})", file=sys.stderr)
        return EXIT_RUNTIME
    print(run_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
