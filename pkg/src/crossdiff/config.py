"""Run configuration: strict TOML schema, presets, initial data and RNG streams.

Every violated rule raises :class:`ConfigError` whose message starts with
the dotted key path, e.g. ``params.eps: eps must lie in (0,1)``.

Randomness: a component that needs random numbers asks for a named stream,
``rng_stream(seed, name)``, which is seeded by
``SeedSequence(seed, spawn_key=(crc32(name),))``. Streams with different
names are independent, and adding a new consumer never shifts the numbers
an existing one sees.
"""

from __future__ import annotations

import dataclasses
import math
import sys
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from . import grid as tg
from .coefficients import (
    MOBILITIES,
    CouplingMatrix,
    identity_matrix,
    seawater_matrix,
    skew_example_matrix,
)
from .continuation import STAGES, LimitSchedule
from .entropy import SpeciesState
from .scheme import LINEAR_METHODS, RegularizationParams, SolverControls


class ConfigError(ValueError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}" if path else reason)
        self.path = path
        self.reason = reason


def stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the component called ``name``."""
    return np.random.Generator(np.random.PCG64(stream_seed(seed, name)))


# --------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class GridConfig:
    dim: int = 1
    n: int = 64
    profile: str = "cosine_bump"


@dataclass(frozen=True)
class MatrixConfig:
    preset: str | None = "identity"
    entries: tuple[tuple[float, ...], ...] | None = None
    eps0: float = 0.025
    a: float = 3.0


@dataclass(frozen=True)
class InitialSpec:
    kind: str
    value: float = 1.0
    center: tuple[float, ...] = (0.5,)
    width: float = 0.1
    amplitude: float = 1.0
    floor: float = 0.1
    min: float = 0.5
    max: float = 2.0
    seed: int | None = None
    left_h: float = 1.0
    right_h: float = 0.5
    g_level: float = 0.5

    @property
    def n_fields(self) -> int:
        return 2 if self.kind == "seawater_dambreak" else 1


@dataclass(frozen=True)
class ToleranceConfig:
    linear_tol: float = 1e-11
    picard_tol: float = 1e-10
    picard_max_iter: int = 200
    damping: float = 0.0
    linear_method: str = "auto"


@dataclass(frozen=True)
class OutputConfig:
    diagnostics_path: str = "diagnostics.csv"
    snapshot_dir: str = "snapshots"
    snapshot_every: int = 0  # 0 disables snapshots


@dataclass(frozen=True)
class ScheduleConfig:
    stage: str = "dt_eps"
    levels: int = 4
    factor: float = 2.0


@dataclass(frozen=True)
class RunConfig:
    grid: GridConfig
    species: int
    matrix: MatrixConfig
    params: RegularizationParams
    initial: tuple[InitialSpec, ...]
    mobility: str = "identity"
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 0
    schedule: ScheduleConfig | None = None

    # -- materialisation --------------------------------------------------

    def grid_spec(self) -> tg.GridSpec:
        return tg.GridSpec(self.grid.dim, self.grid.n)

    def coupling(self) -> CouplingMatrix:
        return build_matrix(self.matrix, self.species)

    def kernel(self) -> tg.MollifierKernel:
        return tg.build_mollifier(self.params.eta, self.grid.profile, self.grid_spec())

    def controls(self) -> SolverControls:
        t = self.tolerances
        return SolverControls(
            linear_tol=t.linear_tol, picard_tol=t.picard_tol, picard_max_iter=t.picard_max_iter,
            damping=t.damping, linear_method=t.linear_method,
        )

    def mobility_function(self):
        return MOBILITIES[self.mobility]

    def initial_state(self) -> SpeciesState:
        return build_initial(self.initial, self.grid_spec(), self.seed)

    def limit_schedule(self) -> LimitSchedule:
        if self.schedule is None:
            raise ConfigError("schedule", "missing [schedule] table")
        s = self.schedule
        return LimitSchedule.geometric(s.stage, self.params, s.levels, s.factor)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed))


# --------------------------------------------------------------------------
# helpers for strict table reading


class _Table:
    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigError(path, "expected a table")
        self.data = data
        self.path = path
        self.used: set[str] = set()

    def key(self, name: str) -> str:
        return f"{self.path}.{name}" if self.path else name

    def get(self, name: str, kind, default=dataclasses.MISSING):
        self.used.add(name)
        if name not in self.data:
            if default is dataclasses.MISSING:
                raise ConfigError(self.key(name), "required key is missing")
            return default
        return _coerce(self.data[name], kind, self.key(name))

    def table(self, name: str, required: bool = False) -> "_Table | None":
        self.used.add(name)
        if name not in self.data:
            if required:
                raise ConfigError(self.key(name), "required table is missing")
            return None
        return _Table(self.data[name], self.key(name))

    def finish(self) -> None:
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigError(self.key(extra[0]), "unknown key")


def _coerce(value, kind, path):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if kind == "floats":
        if not isinstance(value, list):
            raise ConfigError(path, f"expected an array of numbers, got {value!r}")
        return tuple(_coerce(v, float, f"{path}[{i}]") for i, v in enumerate(value))
    if kind == "matrix":
        if not isinstance(value, list) or not value:
            raise ConfigError(path, "expected a non-empty array of rows")
        return tuple(_coerce(r, "floats", f"{path}[{i}]") for i, r in enumerate(value))
    raise TypeError(kind)


# --------------------------------------------------------------------------
# parsing

MATRIX_PRESETS = ("identity", "seawater", "skew_example")
INITIAL_KINDS = ("constant", "gaussian_bump", "random_positive", "seawater_dambreak")


def _parse_params(t: _Table) -> RegularizationParams:
    dt = t.get("dt", float)
    eps = t.get("eps", float)
    ell = t.get("ell", float)
    eta = t.get("eta", float)
    delta = t.get("delta", float)
    horizon = t.get("horizon", float)
    strict = t.get("strict_stability", bool, False)
    t.finish()
    if not dt > 0:
        raise ConfigError(t.key("dt"), "dt must be > 0")
    if not 0 < eps < 1:
        raise ConfigError(t.key("eps"), "eps must lie in (0,1)")
    if not ell > 1:
        raise ConfigError(t.key("ell"), "ell must be > 1")
    if not 0 < eta < 0.5:
        raise ConfigError(t.key("eta"), "eta must lie in (0,1/2)")
    if not delta > 0:
        raise ConfigError(t.key("delta"), "delta must be > 0")
    if not horizon > 0:
        raise ConfigError(t.key("horizon"), "horizon must be > 0")
    try:
        return RegularizationParams(dt, eps, ell, eta, delta, horizon, strict)
    except ValueError as exc:
        raise ConfigError(t.key("horizon"), str(exc)) from None


def _parse_matrix(t: _Table, m: int) -> MatrixConfig:
    preset = t.get("preset", str, None)
    entries = t.get("entries", "matrix", None)
    eps0 = t.get("eps0", float, 0.025)
    a = t.get("a", float, 3.0)
    t.finish()
    if (preset is None) == (entries is None):
        raise ConfigError(t.path, "give exactly one of 'preset' or 'entries'")
    cfg = MatrixConfig(preset, entries, eps0, a)
    if preset is not None and preset not in MATRIX_PRESETS:
        raise ConfigError(t.key("preset"), f"unknown preset {preset!r}; expected one of {MATRIX_PRESETS}")
    if preset == "seawater" and not 0 < eps0 < 1:
        raise ConfigError(t.key("eps0"), "eps0 must lie in (0,1)")
    try:
        A = build_matrix(cfg, m)
    except ValueError as exc:
        raise ConfigError(t.key("entries" if entries else "preset"), str(exc)) from None
    if A.m != m:
        raise ConfigError(t.key("entries" if entries else "preset"), f"matrix is {A.m}x{A.m} but species = {m}")
    return cfg


def _parse_initial(t: _Table, dim: int) -> InitialSpec:
    kind = t.get("kind", str)
    if kind not in INITIAL_KINDS:
        raise ConfigError(t.key("kind"), f"unknown initial condition {kind!r}; expected one of {INITIAL_KINDS}")
    kw: dict[str, Any] = {"kind": kind}
    if kind == "constant":
        kw["value"] = t.get("value", float)
        if not kw["value"] >= 0:
            raise ConfigError(t.key("value"), "initial fields must be >= 0")
    elif kind == "gaussian_bump":
        kw["center"] = t.get("center", "floats")
        kw["width"] = t.get("width", float)
        kw["amplitude"] = t.get("amplitude", float)
        kw["floor"] = t.get("floor", float, 0.0)
        if len(kw["center"]) != dim:
            raise ConfigError(t.key("center"), f"center needs {dim} coordinates")
        if not kw["width"] > 0:
            raise ConfigError(t.key("width"), "width must be > 0")
        if kw["floor"] < 0 or kw["floor"] + min(kw["amplitude"], 0.0) < 0:
            raise ConfigError(t.key("floor"), "initial fields must be >= 0")
    elif kind == "random_positive":
        kw["min"] = t.get("min", float)
        kw["max"] = t.get("max", float)
        kw["seed"] = t.get("seed", int, None)
        if not 0 <= kw["min"] <= kw["max"]:
            raise ConfigError(t.key("min"), "need 0 <= min <= max")
    else:
        kw["left_h"] = t.get("left_h", float)
        kw["right_h"] = t.get("right_h", float)
        kw["g_level"] = t.get("g_level", float)
        for k in ("left_h", "right_h", "g_level"):
            if not kw[k] >= 0:
                raise ConfigError(t.key(k), "initial fields must be >= 0")
    t.finish()
    return InitialSpec(**kw)


def parse_config_dict(data: dict) -> RunConfig:
    root = _Table(data, "")
    seed = root.get("seed", int, 0)
    m = root.get("species", int)
    if m < 1:
        raise ConfigError("species", "species must be >= 1")
    mobility = root.get("mobility", str, "identity")
    if mobility not in MOBILITIES:
        raise ConfigError("mobility", f"unknown mobility {mobility!r}; expected one of {tuple(MOBILITIES)}")

    g = root.table("grid", required=True)
    grid_cfg = GridConfig(g.get("dim", int), g.get("n", int), g.get("profile", str, "cosine_bump"))
    g.finish()
    try:
        gspec = tg.GridSpec(grid_cfg.dim, grid_cfg.n)
    except ValueError as exc:
        raise ConfigError("grid", str(exc)) from None
    if grid_cfg.profile not in tg.PROFILES:
        raise ConfigError("grid.profile", f"unknown mollifier profile; expected one of {tg.PROFILES}")

    matrix = _parse_matrix(root.table("matrix", required=True), m)
    params = _parse_params(root.table("params", required=True))
    if 2 * (math.ceil(params.eta / gspec.h) - 1) + 1 > gspec.n:
        raise ConfigError("params.eta", "mollifier stencil is wider than the grid")

    root.used.add("initial")
    raw_init = data.get("initial")
    if not isinstance(raw_init, list) or not raw_init:
        raise ConfigError("initial", "expected one or more [[initial]] tables")
    initial = tuple(_parse_initial(_Table(d, f"initial[{i}]"), grid_cfg.dim) for i, d in enumerate(raw_init))
    count = sum(s.n_fields for s in initial)
    if count != m:
        raise ConfigError("initial", f"initial data describe {count} species but species = {m}")

    tt = root.table("tolerances")
    tol = ToleranceConfig()
    if tt is not None:
        tol = ToleranceConfig(
            tt.get("linear_tol", float, tol.linear_tol),
            tt.get("picard_tol", float, tol.picard_tol),
            tt.get("picard_max_iter", int, tol.picard_max_iter),
            tt.get("damping", float, tol.damping),
            tt.get("linear_method", str, tol.linear_method),
        )
        tt.finish()
        if not tol.linear_tol > 0:
            raise ConfigError("tolerances.linear_tol", "must be > 0")
        if not tol.picard_tol > 0:
            raise ConfigError("tolerances.picard_tol", "must be > 0")
        if tol.picard_max_iter < 1:
            raise ConfigError("tolerances.picard_max_iter", "must be >= 1")
        if not 0 <= tol.damping < 1:
            raise ConfigError("tolerances.damping", "damping must lie in [0,1)")
        if tol.linear_method not in LINEAR_METHODS:
            raise ConfigError("tolerances.linear_method", f"expected one of {LINEAR_METHODS}")

    ot = root.table("outputs")
    out = OutputConfig()
    if ot is not None:
        out = OutputConfig(
            ot.get("diagnostics_path", str, out.diagnostics_path),
            ot.get("snapshot_dir", str, out.snapshot_dir),
            ot.get("snapshot_every", int, out.snapshot_every),
        )
        ot.finish()
        if out.snapshot_every < 0:
            raise ConfigError("outputs.snapshot_every", "must be >= 0")

    st = root.table("schedule")
    schedule = None
    if st is not None:
        schedule = ScheduleConfig(st.get("stage", str), st.get("levels", int, 4), st.get("factor", float, 2.0))
        st.finish()
        if schedule.stage not in STAGES:
            raise ConfigError("schedule.stage", f"unknown stage {schedule.stage!r}; expected one of {STAGES}")
        if schedule.levels < 1:
            raise ConfigError("schedule.levels", "must be >= 1")
        if not schedule.factor > 1:
            raise ConfigError("schedule.factor", "must be > 1")
        finest_eta = params.eta / schedule.factor ** (schedule.levels - 1)
        if schedule.stage in ("ell_eta", "joint") and not finest_eta > 0:
            raise ConfigError("schedule.levels", "eta underflows")
    root.finish()
    return RunConfig(grid_cfg, m, matrix, params, initial, mobility, tol, out, seed, schedule)


def parse_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"malformed TOML: {exc}") from None
    return parse_config_dict(data)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# --------------------------------------------------------------------------
# serialisation


def _initial_to_dict(s: InitialSpec) -> dict:
    if s.kind == "constant":
        return {"kind": s.kind, "value": s.value}
    if s.kind == "gaussian_bump":
        return {"kind": s.kind, "center": list(s.center), "width": s.width, "amplitude": s.amplitude, "floor": s.floor}
    if s.kind == "random_positive":
        d = {"kind": s.kind, "min": s.min, "max": s.max}
        if s.seed is not None:
            d["seed"] = s.seed
        return d
    return {"kind": s.kind, "left_h": s.left_h, "right_h": s.right_h, "g_level": s.g_level}


def config_to_dict(cfg: RunConfig) -> dict:
    mat: dict[str, Any] = {}
    if cfg.matrix.preset is not None:
        mat["preset"] = cfg.matrix.preset
        if cfg.matrix.preset == "seawater":
            mat["eps0"] = cfg.matrix.eps0
        if cfg.matrix.preset == "skew_example":
            mat["a"] = cfg.matrix.a
    else:
        mat["entries"] = [list(r) for r in cfg.matrix.entries]
    p = cfg.params
    d = {
        "seed": cfg.seed,
        "species": cfg.species,
        "mobility": cfg.mobility,
        "grid": dataclasses.asdict(cfg.grid),
        "matrix": mat,
        "params": {
            "dt": p.dt, "eps": p.eps, "ell": p.ell, "eta": p.eta, "delta": p.delta,
            "horizon": p.horizon, "strict_stability": p.strict_stability,
        },
        "tolerances": dataclasses.asdict(cfg.tolerances),
        "outputs": dataclasses.asdict(cfg.outputs),
        "initial": [_initial_to_dict(s) for s in cfg.initial],
    }
    if cfg.schedule is not None:
        d["schedule"] = dataclasses.asdict(cfg.schedule)
    return d


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


# --------------------------------------------------------------------------
# materialisation


def build_matrix(mc: MatrixConfig, m: int) -> CouplingMatrix:
    if mc.entries is not None:
        return CouplingMatrix(np.array(mc.entries, dtype=float))
    if mc.preset == "identity":
        return identity_matrix(m)
    if mc.preset == "seawater":
        return seawater_matrix(mc.eps0)[0]
    if mc.preset == "skew_example":
        return skew_example_matrix(mc.a)
    raise ValueError(f"unknown matrix preset {mc.preset!r}")


def _periodic_sq_distance(grid: tg.GridSpec, center) -> np.ndarray:
    r2 = np.zeros(grid.shape)
    for x, c in zip(grid.centers(), center):
        d = np.abs(x - c) % 1.0
        d = np.minimum(d, 1.0 - d)
        r2 += d * d
    return r2


def build_initial(specs, grid: tg.GridSpec, seed: int) -> SpeciesState:
    """Sample the initial fields cellwise; stream ``initial/<i>`` feeds species i."""
    fields = []
    for spec in specs:
        i = len(fields)
        if spec.kind == "constant":
            fields.append(np.full(grid.shape, spec.value))
        elif spec.kind == "gaussian_bump":
            r2 = _periodic_sq_distance(grid, spec.center)
            fields.append(spec.floor + spec.amplitude * np.exp(-r2 / (2.0 * spec.width**2)))
        elif spec.kind == "random_positive":
            rng = rng_stream(seed if spec.seed is None else spec.seed, f"initial/{i}")
            fields.append(rng.uniform(spec.min, spec.max, size=grid.shape))
        elif spec.kind == "seawater_dambreak":
            x = grid.centers()[0]
            fields.append(np.where(x < 0.5, spec.left_h, spec.right_h))
            fields.append(np.full(grid.shape, spec.g_level))
        else:
            raise ValueError(f"unknown initial condition {spec.kind!r}")
    return SpeciesState(grid, np.stack(fields))


# --------------------------------------------------------------------------
# demo configurations

PRESETS: dict[str, str] = {
    "porous_medium": """
species = 1
mobility = "identity"

[grid]
dim = 1
n = 64

[matrix]
preset = "identity"

[params]
dt = 0.001
eps = 0.0001
ell = 100.0
eta = 0.01
delta = 0.001
horizon = 0.05

[[initial]]
kind = "gaussian_bump"
center = [0.5]
width = 0.1
amplitude = 1.0
floor = 0.0
""",
    "seawater": """
species = 2

[grid]
dim = 1
n = 64

[matrix]
preset = "seawater"
eps0 = 0.025

[params]
dt = 0.001
eps = 0.1
ell = 10.0
eta = 0.1
delta = 0.05
horizon = 0.1

[[initial]]
kind = "gaussian_bump"
center = [0.5]
width = 0.08
amplitude = 0.5
floor = 1.0

[[initial]]
kind = "gaussian_bump"
center = [0.3]
width = 0.08
amplitude = 0.3
floor = 0.8
""",
    "skew_example": """
species = 2

[grid]
dim = 1
n = 64

[matrix]
preset = "skew_example"
a = 3.0

[params]
dt = 0.001
eps = 0.1
ell = 10.0
eta = 0.1
delta = 0.05
horizon = 0.1

[[initial]]
kind = "random_positive"
min = 0.5
max = 2.0

[[initial]]
kind = "random_positive"
min = 0.5
max = 2.0
""",
    "seawater_dambreak": """
species = 2

[grid]
dim = 1
n = 128

[matrix]
preset = "seawater"
eps0 = 0.025

[params]
dt = 0.0005
eps = 0.05
ell = 10.0
eta = 0.05
delta = 0.01
horizon = 0.05

[[initial]]
kind = "seawater_dambreak"
left_h = 1.0
right_h = 0.4
g_level = 0.6
""",
}


def preset_config(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError("", f"unknown preset {name!r}; expected one of {tuple(PRESETS)}")
    return parse_config(PRESETS[name])
