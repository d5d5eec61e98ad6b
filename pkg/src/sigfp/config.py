"""Run configuration: YAML files with line-precise validation, and presets.

A config is a single YAML mapping.  Unknown keys, wrong types and
out-of-range values raise :class:`ConfigError` naming the dotted field path
and the 1-based line where the offending value sits.
"""

from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from . import nnkit as nk
from .errors import ConfigError
from .pathsim import TimeGrid

BENCHMARK_NAMES = ("gaussian-kernel", "analytic-mvfbsde", "flocking")
FEATURES = ("sig", "logsig")
VARIANTS = ("linear", "direct")
ACTIVATIONS = ("tanh", "silu", "identity")


@dataclass
class GridSection:
    T: float = 1.0
    N_T: int = 120
    fine_factor: int = 4


@dataclass
class ScheduleSection:
    initial_rate: float = 3e-3
    decay_factor: float = 1.0
    decay_every: int = 1_000_000_000
    stage_factor: float = 1.0
    stage_offset: int = 1
    milestones: list[int] = field(default_factory=list)
    decay_until: typing.Optional[int] = None

    def build(self):
        return nk.LrSchedule(self.initial_rate, self.decay_factor, self.decay_every,
                             self.stage_factor, self.stage_offset, tuple(self.milestones),
                             self.decay_until)


@dataclass
class SignatureSection:
    depth: int = 2
    feature: str = "logsig"


@dataclass
class NetworkSection:
    variant: str = "direct"
    embed_hidden: list[int] = field(default_factory=lambda: [64, 64])
    embed_activation: str = "silu"
    u_hidden: list[int] = field(default_factory=lambda: [64, 64])
    z_hidden: list[int] = field(default_factory=lambda: [128, 128, 128, 128])
    field_activation: str = "tanh"


@dataclass
class EmbedSection:
    steps: int = 5000
    batch: typing.Optional[int] = 4096
    schedule: ScheduleSection = field(default_factory=ScheduleSection)


@dataclass
class BsdeSection:
    steps: int = 2000
    N1: int = 256
    N2: int = 128
    regen_every: int = 20
    schedule: ScheduleSection = field(default_factory=ScheduleSection)


@dataclass
class EvalSection:
    N1: int = 64
    N2: int = 16


@dataclass
class FlockingSection:
    beta: float = 0.0
    C: float = 0.1
    D: float = 0.3
    R: float = 0.5
    Q: float = 0.5
    density_particles: int = 512


@dataclass
class KernelSection:
    epochs: int = 300
    steps_per_epoch: int = 50
    batch: int = 1024
    eval_J: int = 1000


@dataclass
class RunConfig:
    benchmark: str = "analytic-mvfbsde"
    d: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    grid: GridSection = field(default_factory=GridSection)
    N1: int = 256
    N2: int = 128
    stages: int = 30
    signature: SignatureSection = field(default_factory=SignatureSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    embed: EmbedSection = field(default_factory=EmbedSection)
    bsde: BsdeSection = field(default_factory=BsdeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    flocking: FlockingSection = field(default_factory=FlockingSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    threads: int = 1
    output_dir: str = "runs"
    name: str = "run"

    def time_grid(self):
        g = self.grid
        return TimeGrid(g.T, g.N_T, g.fine_factor)

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


# --------------------------------------------------------------------------
# Loading and validation
# --------------------------------------------------------------------------
def _line_map(node, path=(), out=None):
    """Map dotted paths to 1-based source lines by walking the YAML node tree."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            _line_map(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (str(i),), out)
    return out


class _Ctx:
    def __init__(self, lines):
        self.lines = lines

    def fail(self, path, message):
        p = tuple(path)
        while p and p not in self.lines:
            p = p[:-1]
        raise ConfigError(message, field=".".join(path) or "<root>", line=self.lines.get(p))


def _coerce(ctx, tp, value, path):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(ctx, args[0], value, path)
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            ctx.fail(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(ctx, inner, v, path + [str(i)]) for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _build(ctx, tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            ctx.fail(path, "expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            ctx.fail(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            ctx.fail(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            ctx.fail(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(f"unsupported field type {tp}", field=".".join(path))


def _build(ctx, cls, value, path):
    if value is None:
        value = {}
    if not isinstance(value, dict):
        ctx.fail(path, f"expected a mapping, got {type(value).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in value:
        if key not in names:
            ctx.fail(path + [str(key)], f"unknown field (allowed: {', '.join(sorted(names))})")
    kwargs = {k: _coerce(ctx, hints[k], v, path + [k]) for k, v in value.items()}
    return cls(**kwargs)


def _check(ctx, cfg):
    def positive(path, v):
        if v is None or v < 1:
            ctx.fail(path, f"must be >= 1, got {v}")

    def choice(path, v, options):
        if v not in options:
            ctx.fail(path, f"must be one of {', '.join(options)}, got {v!r}")

    choice(["benchmark"], cfg.benchmark, BENCHMARK_NAMES)
    for p, v in ((["d"], cfg.d), (["grid", "N_T"], cfg.grid.N_T),
                 (["grid", "fine_factor"], cfg.grid.fine_factor), (["N1"], cfg.N1),
                 (["N2"], cfg.N2), (["stages"], cfg.stages), (["threads"], cfg.threads),
                 (["signature", "depth"], cfg.signature.depth),
                 (["embed", "steps"], cfg.embed.steps), (["bsde", "steps"], cfg.bsde.steps),
                 (["bsde", "N1"], cfg.bsde.N1), (["bsde", "N2"], cfg.bsde.N2),
                 (["bsde", "regen_every"], cfg.bsde.regen_every),
                 (["eval", "N1"], cfg.eval.N1), (["eval", "N2"], cfg.eval.N2),
                 (["kernel", "epochs"], cfg.kernel.epochs),
                 (["kernel", "steps_per_epoch"], cfg.kernel.steps_per_epoch),
                 (["kernel", "batch"], cfg.kernel.batch),
                 (["kernel", "eval_J"], cfg.kernel.eval_J),
                 (["flocking", "density_particles"], cfg.flocking.density_particles)):
        positive(p, v)
    if cfg.embed.batch is not None:
        positive(["embed", "batch"], cfg.embed.batch)
    if not cfg.grid.T > 0:
        ctx.fail(["grid", "T"], f"must be positive, got {cfg.grid.T}")
    if not cfg.seeds:
        ctx.fail(["seeds"], "at least one seed is required")
    for i, s in enumerate(cfg.seeds):
        if s < 0:
            ctx.fail(["seeds", str(i)], f"seeds must be non-negative, got {s}")
    choice(["signature", "feature"], cfg.signature.feature, FEATURES)
    choice(["network", "variant"], cfg.network.variant, VARIANTS)
    choice(["network", "embed_activation"], cfg.network.embed_activation, ACTIVATIONS)
    choice(["network", "field_activation"], cfg.network.field_activation, ACTIVATIONS)
    for sec in ("embed_hidden", "u_hidden", "z_hidden"):
        for i, w in enumerate(getattr(cfg.network, sec)):
            positive(["network", sec, str(i)], w)
    for sec in ("embed", "bsde"):
        s = getattr(cfg, sec).schedule
        path = [sec, "schedule"]
        if not s.initial_rate > 0:
            ctx.fail(path + ["initial_rate"], "must be positive")
        for name in ("decay_factor", "stage_factor"):
            if not 0 < getattr(s, name) <= 1:
                ctx.fail(path + [name], "must lie in (0, 1]")
        positive(path + ["decay_every"], s.decay_every)
        if s.milestones != sorted(s.milestones):
            ctx.fail(path + ["milestones"], "must be increasing")
    f = cfg.flocking
    if f.beta < 0:
        ctx.fail(["flocking", "beta"], "must be >= 0")
    for name in ("R", "Q"):
        if not getattr(f, name) > 0:
            ctx.fail(["flocking", name], "must be positive")
    if cfg.benchmark == "flocking" and cfg.d < 1:
        ctx.fail(["d"], "must be >= 1")
    if not cfg.output_dir:
        ctx.fail(["output_dir"], "must not be empty")


def parse_config(text, source="<config>"):
    """Parse and validate YAML text into a :class:`RunConfig`."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"{source}: not valid YAML ({getattr(exc, 'problem', exc)})",
                          line=line) from None
    ctx = _Ctx(_line_map(node) if node is not None else {})
    cfg = _build(ctx, RunConfig, data, [])
    _check(ctx, cfg)
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))


def from_dict(data):
    """Validate a plain mapping (used for presets)."""
    return parse_config(yaml.safe_dump(data, sort_keys=False))


def override(cfg, **changes):
    """Copy of ``cfg`` with dotted-path overrides, e.g. ``{"flocking.beta": 1.0}``."""
    data = copy.deepcopy(cfg.to_dict())
    for key, value in changes.items():
        *head, last = key.replace("__", ".").split(".")
        node = data
        for h in head:
            node = node[h]
        node[last] = value
    return from_dict(data)


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------
def _sched(rate, factor=1.0, every=1_000_000_000, stage_factor=1.0, stage_offset=1,
           milestones=(), decay_until=None):
    return {"initial_rate": rate, "decay_factor": factor, "decay_every": every,
            "stage_factor": stage_factor, "stage_offset": stage_offset,
            "milestones": list(milestones), "decay_until": decay_until}


PRESETS = {
    "paper-5.1": {
        "benchmark": "gaussian-kernel", "d": 5, "seeds": [0, 1, 2, 3, 4],
        "grid": {"T": 1.0, "N_T": 120, "fine_factor": 4},
        "N1": 128, "N2": 64, "stages": 1,
        "signature": {"depth": 2, "feature": "logsig"},
        "network": {"variant": "direct", "embed_hidden": [64, 64], "embed_activation": "silu"},
        "kernel": {"epochs": 300, "steps_per_epoch": 50, "batch": 1024, "eval_J": 1000},
        "embed": {"schedule": _sched(3e-3, 0.95, 100, decay_until=5000)},
        "name": "paper-5.1",
    },
    "paper-5.2": {
        "benchmark": "analytic-mvfbsde", "d": 1, "seeds": [0, 1, 2, 3, 4],
        "grid": {"T": 1.0, "N_T": 120, "fine_factor": 4},
        "N1": 256, "N2": 128, "stages": 30,
        "signature": {"depth": 2, "feature": "logsig"},
        "network": {"variant": "direct", "embed_hidden": [64, 64], "embed_activation": "silu",
                    "u_hidden": [64, 64], "z_hidden": [128, 128, 128, 128],
                    "field_activation": "tanh"},
        "embed": {"steps": 5000, "batch": 4096, "schedule": _sched(1.2e-4, 0.8, 500, 0.95)},
        "bsde": {"steps": 2000, "N1": 256, "N2": 128, "regen_every": 20,
                 "schedule": _sched(2.5e-4, 0.3, stage_factor=0.9, stage_offset=20,
                                    milestones=(1000, 1500))},
        "eval": {"N1": 256, "N2": 128},
        "name": "paper-5.2",
    },
    "paper-5.3": {
        "benchmark": "flocking", "d": 3, "seeds": [0],
        "grid": {"T": 1.0, "N_T": 120, "fine_factor": 4},
        "N1": 512, "N2": 128, "stages": 20,
        "signature": {"depth": 2, "feature": "logsig"},
        "network": {"variant": "direct", "embed_hidden": [64, 64], "embed_activation": "silu",
                    "u_hidden": [64, 64], "z_hidden": [128, 128, 128, 128],
                    "field_activation": "tanh"},
        "embed": {"steps": 5000, "batch": 4096, "schedule": _sched(2.5e-4, 0.8, 1000)},
        "bsde": {"steps": 3000, "N1": 512, "N2": 128, "regen_every": 30,
                 "schedule": _sched(7.5e-5, 0.3, 1000)},
        "eval": {"N1": 512, "N2": 16},
        "flocking": {"beta": 0.0, "C": 0.1, "D": 0.3, "R": 0.5, "Q": 0.5},
        "name": "paper-5.3",
    },
    "desk-5.1": {
        "benchmark": "gaussian-kernel", "d": 1, "seeds": [0, 1, 2],
        "grid": {"T": 1.0, "N_T": 40, "fine_factor": 4},
        "N1": 64, "N2": 32, "stages": 1,
        "signature": {"depth": 2, "feature": "logsig"},
        "network": {"variant": "direct", "embed_hidden": [64, 64], "embed_activation": "silu"},
        "kernel": {"epochs": 50, "steps_per_epoch": 50, "batch": 1024, "eval_J": 1000},
        "embed": {"schedule": _sched(3e-3, 0.95, 100, decay_until=5000)},
        "name": "desk-5.1",
    },
    "desk-5.2": {
        "benchmark": "analytic-mvfbsde", "d": 1, "seeds": [0],
        "grid": {"T": 1.0, "N_T": 40, "fine_factor": 4},
        "N1": 64, "N2": 16, "stages": 10,
        "signature": {"depth": 2, "feature": "logsig"},
        "network": {"variant": "direct", "embed_hidden": [32, 32], "embed_activation": "silu",
                    "u_hidden": [32, 32], "z_hidden": [32, 32], "field_activation": "tanh"},
        "embed": {"steps": 200, "batch": 4096, "schedule": _sched(3e-3, 0.8, 100, 0.95)},
        "bsde": {"steps": 200, "N1": 16, "N2": 16, "regen_every": 20,
                 "schedule": _sched(3e-3, 0.2, stage_factor=0.85, milestones=(100, 160))},
        "eval": {"N1": 64, "N2": 16},
        "name": "desk-5.2",
    },
    "desk-5.3": {
        "benchmark": "flocking", "d": 3, "seeds": [0],
        "grid": {"T": 1.0, "N_T": 20, "fine_factor": 4},
        "N1": 64, "N2": 256, "stages": 10,
        "signature": {"depth": 2, "feature": "logsig"},
        "network": {"variant": "direct", "embed_hidden": [32, 32], "embed_activation": "silu",
                    "u_hidden": [32, 32], "z_hidden": [32, 32], "field_activation": "tanh"},
        "embed": {"steps": 600, "batch": 4096, "schedule": _sched(3e-3, 0.8, 100, 0.95)},
        "bsde": {"steps": 200, "N1": 16, "N2": 16, "regen_every": 20,
                 "schedule": _sched(3e-3, 0.2, stage_factor=0.85, milestones=(100, 160))},
        "eval": {"N1": 64, "N2": 16},
        "flocking": {"beta": 0.0, "C": 0.1, "D": 0.3, "R": 0.5, "Q": 0.5,
                     "density_particles": 512},
        "name": "desk-5.3",
    },
}

# Cheaper flocking variant used for the beta sweep.
PRESETS["desk-5.3-sweep"] = copy.deepcopy(PRESETS["desk-5.3"])
PRESETS["desk-5.3-sweep"].update({"N2": 128, "name": "desk-5.3-sweep"})
PRESETS["desk-5.3-sweep"]["embed"]["steps"] = 400


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(PRESETS)})",
                          field="preset")
    return from_dict(PRESETS[name])
