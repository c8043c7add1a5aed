"""Run and sweep configuration: versioned, human-editable JSON.

A config file captures everything a run depends on, so a persisted config
re-runs to byte-identical outputs.  All dynamical quantities are expressed
in simulation units (lengths in wavelengths, times in single-atom lifetimes,
rates in gamma0); the physical constants stored alongside are conversion
factors for presentation and default to the experimental values 841 nm and
20 us.  Serialization is plain JSON with sorted keys and repr-roundtrip
floats, which makes the on-disk form deterministic.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .couplings import MotionSpec
from .cumulant import make_time_grid
from .exact import DEFAULT_ATOM_CAP, InitialStateSpec
from .geometry import DisorderSpec, DriveGeometry, LatticeSpec

SCHEMA_VERSION = 1

SOLVERS = ("exact", "cumulant")
INITIAL_STATES = ("inverted", "incoherent", "coherent")
GRID_KINDS = ("standard", "linear")
SWEEP_AXES = ("atom_number", "spacing", "disorder_sigma", "excitation_fraction")
SEED_POLICIES = ("shared", "per_point")

__all__ = [
    "SCHEMA_VERSION",
    "SWEEP_AXES",
    "ConfigError",
    "RunConfig",
    "SweepConfig",
    "load_any_config",
]


class ConfigError(ValueError):
    """Invalid configuration; `where` names the offending field or file spot."""

    def __init__(self, message: str, where: str = ""):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


def _require(condition: bool, message: str, where: str):
    if not condition:
        raise ConfigError(message, where)


def _check_field_types(cls, data: dict, where: str) -> None:
    """Per-field type checks so a bad value is reported by name.

    Expected types are inferred from the field defaults (every field has
    one); fields defaulting to None accept numbers or None.
    """
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value, default = data[f.name], f.default
        if isinstance(default, bool):
            ok = isinstance(value, bool)
            expected = "true/false"
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
            expected = "an integer"
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            expected = "a number"
        elif isinstance(default, str):
            ok = isinstance(value, str)
            expected = "a string"
        elif isinstance(default, tuple):
            ok = isinstance(value, (list, tuple))
            expected = "a list"
        else:  # fields defaulting to None hold optional numbers
            ok = value is None or (isinstance(value, (int, float))
                                   and not isinstance(value, bool))
            expected = "a number or null"
        if not ok:
            raise ConfigError(f"expected {expected}, got {value!r}",
                              f"{where}: {f.name}")


@dataclass(frozen=True)
class RunConfig:
    """One solver run: geometry, initial state, solver, grid, seeds, outputs."""

    # presentation constants (SI conversion factors, not used by solvers)
    wavelength_nm: float = 841.0
    lifetime_us: float = 20.0
    # lattice
    rows: int = 4
    cols: int = 4
    spacing: float = 0.316
    fill_probability: float = 1.0
    atom_number_target: int | None = None
    # drive / dipole orientation, in-plane angles from +x in degrees
    quantization_deg: float = 30.0
    beam_deg: float = 15.0
    polarization: str = "sigma_minus"
    # positional disorder (sigma in wavelengths; 0 disables)
    disorder_sigma: float = 0.0
    disorder_in_plane_only: bool = False
    # motional averaging (enabled flag keeps the defaults visible in files)
    motion_enabled: bool = False
    motion_widths: tuple = (0.05, 0.05, 0.1)
    motion_excited_band_probability: float = 0.06
    motion_samples: int = 20_000
    # initial state
    initial_state: str = "inverted"
    excitation_fraction: float = 1.0
    phase_from_beam: bool = True
    phase_offset: float = 0.0
    # solver
    solver: str = "cumulant"
    closure_alpha: int = 2
    rtol: float = 1e-7
    atol: float = 1e-9
    # time grid (units of tau)
    grid_kind: str = "standard"
    t_end: float = 20.0
    dense_until: float = 5.0
    dense_step: float = 0.05
    log_points: int = 40
    linear_points: int = 201
    # sampling
    realizations: int = 1
    master_seed: int = 0
    # analysis outputs
    fit_terms: int = 0
    fit_window: float | None = None
    fit_resamples: int = 500
    correlation_times: tuple = ()
    # bookkeeping
    label: str = "run"
    outdir: str = "out"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "motion_widths", tuple(float(w) for w in self.motion_widths))
        object.__setattr__(self, "correlation_times",
                           tuple(float(t) for t in self.correlation_times))
        _require(self.schema_version == SCHEMA_VERSION,
                 f"unsupported schema_version {self.schema_version}", "schema_version")
        _require(self.wavelength_nm > 0, "must be positive", "wavelength_nm")
        _require(self.lifetime_us > 0, "must be positive", "lifetime_us")
        _require(self.rows >= 1 and self.cols >= 1, "lattice needs rows, cols >= 1", "rows/cols")
        _require(self.spacing > 0, "must be positive", "spacing")
        _require(0.0 <= self.fill_probability <= 1.0, "must lie in [0, 1]", "fill_probability")
        _require(self.polarization in ("sigma_minus", "sigma_plus"),
                 "must be sigma_minus or sigma_plus", "polarization")
        _require(self.disorder_sigma >= 0, "must be >= 0", "disorder_sigma")
        _require(self.initial_state in INITIAL_STATES,
                 f"must be one of {INITIAL_STATES}", "initial_state")
        _require(0.0 <= self.excitation_fraction <= 1.0,
                 "must lie in [0, 1]", "excitation_fraction")
        _require(self.solver in SOLVERS, f"must be one of {SOLVERS}", "solver")
        _require(self.closure_alpha in (1, 2, 3), "must be 1, 2, or 3", "closure_alpha")
        if self.solver == "exact":
            n_max = self.atom_number_target or self.rows * self.cols
            _require(n_max <= DEFAULT_ATOM_CAP,
                     f"{n_max} atoms exceed the exact-solver cap {DEFAULT_ATOM_CAP}",
                     "solver")
            _require(self.realizations == 1,
                     "exact solver supports a single realization per run", "realizations")
        if self.solver == "cumulant" and self.closure_alpha == 3:
            _require(self.initial_state != "coherent",
                     "third-order closure tracks the incoherent sector only",
                     "initial_state")
        _require(self.grid_kind in GRID_KINDS, f"must be one of {GRID_KINDS}", "grid_kind")
        _require(self.t_end > 0, "must be positive", "t_end")
        if self.grid_kind == "standard":
            _require(self.dense_until > 0 and self.dense_step > 0,
                     "dense_until and dense_step must be positive", "grid")
            _require(self.log_points >= 1, "must be >= 1", "log_points")
        else:
            _require(self.linear_points >= 2, "must be >= 2", "linear_points")
        _require(self.realizations >= 1, "must be >= 1", "realizations")
        _require(self.rtol > 0 and self.atol > 0, "tolerances must be positive", "rtol/atol")
        _require(self.fit_terms in (0, 1, 2, 3), "must be 0 (skip) to 3", "fit_terms")
        _require(self.fit_resamples >= 0, "must be >= 0", "fit_resamples")
        for t in self.correlation_times:
            _require(0 <= t <= self.t_end, "must lie on the time grid", "correlation_times")
        if self.correlation_times:
            _require(self.realizations == 1,
                     "correlation snapshots need realizations = 1", "correlation_times")
        _require(bool(self.label), "must be non-empty", "label")

    # ---- builders for the solver-facing spec objects

    def lattice_spec(self) -> LatticeSpec:
        return LatticeSpec(rows=self.rows, cols=self.cols, spacing=self.spacing,
                           fill_probability=self.fill_probability,
                           atom_number_target=self.atom_number_target)

    def drive(self) -> DriveGeometry:
        return DriveGeometry.from_angles(quantization_deg=self.quantization_deg,
                                         beam_deg=self.beam_deg,
                                         polarization=self.polarization)

    def disorder_spec(self) -> DisorderSpec | None:
        if self.disorder_sigma == 0:
            return None
        return DisorderSpec(sigma=self.disorder_sigma,
                            in_plane_only=self.disorder_in_plane_only)

    def motion_spec(self) -> MotionSpec | None:
        if not self.motion_enabled:
            return None
        return MotionSpec(widths=self.motion_widths,
                          excited_band_probability=self.motion_excited_band_probability,
                          samples=self.motion_samples)

    def initial_state_spec(self) -> InitialStateSpec:
        if self.initial_state == "inverted":
            return InitialStateSpec.fully_inverted()
        if self.initial_state == "incoherent":
            return InitialStateSpec.incoherent(self.excitation_fraction)
        theta = 2.0 * math.asin(math.sqrt(self.excitation_fraction))
        k_laser = tuple(float(c) for c in self.drive().beam_axis) if self.phase_from_beam else None
        return InitialStateSpec.coherent_pulse(theta, k_laser=k_laser,
                                               phase_offset=self.phase_offset)

    def times(self):
        if self.grid_kind == "linear":
            return np.linspace(0.0, self.t_end, self.linear_points)
        return make_time_grid(dense_until=min(self.dense_until, self.t_end),
                              end=self.t_end, dense_step=self.dense_step,
                              log_points=self.log_points)

    # ---- serialization

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["motion_widths"] = list(self.motion_widths)
        d["correlation_times"] = list(self.correlation_times)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict, where: str = "run config") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("expected a JSON object", where)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown fields {unknown}", where)
        _check_field_types(cls, data, where)
        try:
            return cls(**data)
        except ConfigError as exc:
            raise ConfigError(str(exc), where) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), where) from None

    @classmethod
    def from_json(cls, text: str, where: str = "run config") -> "RunConfig":
        return cls.from_dict(_parse_json(text, where), where)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read(), where=str(path))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())


@dataclass(frozen=True)
class SweepConfig:
    """A family of runs along one axis, plus the per-axis post-processing.

    `seed_policy` controls the master seed of point i: "shared" reuses the
    base seed everywhere (common random numbers, smoother trends along the
    axis), "per_point" derives an independent seed per point.
    """

    base: RunConfig
    axis: str
    values: tuple
    seed_policy: str = "shared"
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        _require(self.schema_version == SCHEMA_VERSION,
                 f"unsupported schema_version {self.schema_version}", "schema_version")
        _require(self.axis in SWEEP_AXES, f"must be one of {SWEEP_AXES}", "axis")
        _require(len(self.values) >= 1, "must be non-empty", "values")
        _require(self.seed_policy in SEED_POLICIES,
                 f"must be one of {SEED_POLICIES}", "seed_policy")
        _require(self.workers >= 1, "must be >= 1", "workers")
        diffs = [b - a for a, b in zip(self.values, self.values[1:])]
        _require(all(d > 0 for d in diffs) or all(d < 0 for d in diffs) or not diffs,
                 "values must be strictly monotone", "values")
        if self.axis == "atom_number":
            for v in self.values:
                n = int(v)
                _require(n == v and n >= 1, "atom numbers must be positive integers",
                         "values")
                _require(math.isqrt(n) ** 2 == n,
                         f"{n} is not a perfect square (points are square arrays)",
                         "values")
            _require(len(self.values) >= 4,
                     "scaling-exponent fit needs at least 4 atom numbers", "values")
        if self.axis == "spacing":
            _require(self.base.t_end >= 1.75,
                     "resonance deviation fits the first 1.75 tau; raise t_end",
                     "base.t_end")
        if self.axis == "excitation_fraction":
            for v in self.values:
                _require(0 < v <= 1, "fractions must lie in (0, 1]", "values")
            _require(self.base.initial_state == "coherent",
                     "excitation_fraction sweeps drive the coherent initial state",
                     "base.initial_state")

    def point_config(self, index: int, outdir: str) -> RunConfig:
        from .seeding import STREAM_SWEEP, derive_seed
        value = self.values[index]
        seed = (self.base.master_seed if self.seed_policy == "shared"
                else derive_seed(self.base.master_seed, STREAM_SWEEP, index))
        common = dict(master_seed=seed, outdir=outdir,
                      label=f"{self.base.label}_{self.axis}_{index:03d}")
        if self.axis == "atom_number":
            side = math.isqrt(int(value))
            return dataclasses.replace(self.base, rows=side, cols=side, **common)
        if self.axis == "spacing":
            return dataclasses.replace(self.base, spacing=float(value), **common)
        if self.axis == "disorder_sigma":
            return dataclasses.replace(self.base, disorder_sigma=float(value), **common)
        return dataclasses.replace(self.base, initial_state="coherent",
                                   excitation_fraction=float(value), **common)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "axis": self.axis,
                "values": list(self.values), "seed_policy": self.seed_policy,
                "workers": self.workers, "base": self.base.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict, where: str = "sweep config") -> "SweepConfig":
        if not isinstance(data, dict):
            raise ConfigError("expected a JSON object", where)
        known = {"schema_version", "axis", "values", "seed_policy", "workers", "base"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown fields {unknown}", where)
        if "base" not in data or "axis" not in data or "values" not in data:
            raise ConfigError("sweep config needs base, axis, and values", where)
        base = RunConfig.from_dict(data["base"], where=f"{where}: base")
        try:
            return cls(base=base, axis=data["axis"], values=tuple(data["values"]),
                       seed_policy=data.get("seed_policy", "shared"),
                       workers=int(data.get("workers", 1)),
                       schema_version=int(data.get("schema_version", SCHEMA_VERSION)))
        except ConfigError as exc:
            raise ConfigError(str(exc), where) from None

    @classmethod
    def from_json(cls, text: str, where: str = "sweep config") -> "SweepConfig":
        return cls.from_dict(_parse_json(text, where), where)

    @classmethod
    def load(cls, path) -> "SweepConfig":
        with open(path) as fh:
            return cls.from_json(fh.read(), where=str(path))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())


def _parse_json(text: str, where: str) -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}", where) from None


def load_any_config(path):
    """Load `path` as a SweepConfig when it has an axis field, else RunConfig."""
    with open(path) as fh:
        data = _parse_json(fh.read(), str(path))
    if isinstance(data, dict) and "axis" in data:
        return SweepConfig.from_dict(data, where=str(path))
    return RunConfig.from_dict(data, where=str(path))
