"""Run orchestration: solve, persist, verify, sweep, and emit plot data.

Every output is plain text with deterministic formatting; the manifest
records a sha256 per file and no timestamps, so re-running a persisted
config on the same build reproduces the bundle byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    DecayTrace,
    analytic_independent_spin,
    connected_correlations,
    fit_stretched,
    instantaneous_rate,
    resonance_deviation,
    subradiant_tail,
)
from .config import ConfigError, RunConfig, SweepConfig
from .couplings import coupling_matrices, spectrum_scan
from .cumulant import ClosureOrder, EnsembleConfig, ensemble_run, evolve_cumulant
from .exact import evolve_exact
from .geometry import DisorderSpec, build_array
from .seeding import STREAM_BOOTSTRAP, STREAM_ENSEMBLE, STREAM_MOTION, derive_seed, rng_for
from .tableio import read_table, write_table

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFY = 4

PLOT_PRESETS = ("decay", "rate", "correlations", "scaling", "spacing", "spin_ssz")
# Correlation outputs use the contract's default central region.
CORRELATION_CENTER_FRACTION = 0.5

__all__ = [
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_SOLVER",
    "EXIT_VERIFY",
    "PLOT_PRESETS",
    "OutputBundle",
    "SolverFailure",
    "VerificationError",
    "MissingOutputsError",
    "run",
    "sweep",
    "verify",
    "emit_plot_data",
]


class SolverFailure(RuntimeError):
    """Dynamics could not be produced; partial outputs were preserved."""


class VerificationError(RuntimeError):
    def __init__(self, mismatches):
        self.mismatches = list(mismatches)
        super().__init__("; ".join(self.mismatches))


class MissingOutputsError(RuntimeError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing prerequisite outputs: " + ", ".join(self.missing))


@dataclass
class OutputBundle:
    outdir: Path
    manifest: dict
    trace: object | None = None
    analysis: dict | None = None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _bundle_files(outdir: Path) -> dict:
    """Hash every file in the bundle except the bundle's own manifest.

    Nested manifests (per-point manifests inside a sweep) are included; only
    the top-level one is excluded because it cannot record its own hash.
    """
    files = {}
    for p in sorted(outdir.rglob("*")):
        rel = p.relative_to(outdir).as_posix()
        if p.is_file() and rel != "manifest.json":
            files[rel] = _sha256(p)
    return files


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_manifest(outdir: Path, manifest: dict) -> None:
    manifest["files"] = _bundle_files(outdir)
    _write_json(outdir / "manifest.json", manifest)


def _gamma_normalized(n_excited: np.ndarray, rate: np.ndarray) -> np.ndarray:
    out = np.full_like(rate, np.nan)
    ok = n_excited > 1e-12
    out[ok] = rate[ok] / n_excited[ok]
    return out


def _grid_index(times: np.ndarray, t: float) -> int:
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise ConfigError(f"correlation time {t} is not on the time grid",
                          "correlation_times")
    return k


def _solve(config: RunConfig):
    """Run the configured solver; returns (trace_like, seeds, corr_inputs).

    corr_inputs maps requested correlation time -> (array, populations,
    pair_populations) for the snapshot at that time.
    """
    times = config.times()
    lattice = config.lattice_spec()
    disorder = config.disorder_spec()
    drive = config.drive()
    motion = config.motion_spec()
    init = config.initial_state_spec()
    corr_inputs = {}

    if config.solver == "exact":
        seed0 = derive_seed(config.master_seed, STREAM_ENSEMBLE, 0)
        array = build_array(lattice, disorder=disorder, drive=drive, seed=seed0)
        motion_r = None if motion is None else dataclasses.replace(
            motion, seed=derive_seed(seed0, STREAM_MOTION))
        cpl = coupling_matrices(array, motion=motion_r)
        traj = evolve_exact(init, array, cpl, times, rtol=config.rtol, atol=config.atol)
        for t in config.correlation_times:
            k = _grid_index(times, t)
            corr_inputs[float(times[k])] = (array, traj.populations[k],
                                            traj.pair_populations[k])
        return traj, [seed0], corr_inputs

    order = ClosureOrder(alpha=config.closure_alpha, coherent_sector=init.coherent)
    if config.realizations == 1:
        # Single realization solved directly so correlation snapshots are
        # available; seeding matches ensemble_run with one realization.
        seed0 = derive_seed(config.master_seed, STREAM_ENSEMBLE, 0)
        array = build_array(lattice, disorder=disorder, drive=drive, seed=seed0)
        motion_r = None if motion is None else dataclasses.replace(
            motion, seed=derive_seed(seed0, STREAM_MOTION))
        cpl = coupling_matrices(array, motion=motion_r)
        snap_times = [float(times[_grid_index(times, t)])
                      for t in config.correlation_times] or None
        trace = evolve_cumulant(init, array, cpl, order, times, rtol=config.rtol,
                                atol=config.atol, snapshot_times=snap_times)
        for t, snap in trace.snapshots.items():
            if snap["pair_populations"] is None:
                raise ConfigError(
                    "correlation snapshots need pair populations; use "
                    "closure_alpha >= 2 or the exact solver", "correlation_times")
            corr_inputs[t] = (array, snap["populations"], snap["pair_populations"])
        return trace, [seed0], corr_inputs

    ens = EnsembleConfig(lattice=lattice, init=init, order=order, times=tuple(times),
                         disorder=disorder, drive=drive, motion=motion,
                         rtol=config.rtol, atol=config.atol)
    trace = ensemble_run(ens, config.realizations, config.master_seed)
    seeds = [derive_seed(config.master_seed, STREAM_ENSEMBLE, r)
             for r in range(config.realizations)]
    return trace, seeds, corr_inputs


def _trace_columns(trace) -> dict:
    cols = {
        "t": np.asarray(trace.times, float),
        "n_excited": np.asarray(trace.n_excited, float),
        "emission_rate": np.asarray(trace.emission_rate, float),
        "gamma_normalized": _gamma_normalized(np.asarray(trace.n_excited, float),
                                              np.asarray(trace.emission_rate, float)),
        "s_z": np.asarray(trace.s_z, float),
        "m_perp_sq": np.asarray(trace.m_perp_sq, float),
    }
    stderr = getattr(trace, "stderr", None)
    if stderr is not None:
        for key in ("n_excited", "emission_rate", "s_z", "m_perp_sq"):
            cols[f"stderr_{key}"] = stderr[key]
    return cols


def _analysis_summary(trace) -> dict:
    t = np.asarray(trace.times, float)
    n_e = np.asarray(trace.n_excited, float)
    gamma = _gamma_normalized(n_e, np.asarray(trace.emission_rate, float))
    summary: dict = {
        "initial_gamma_normalized": float(gamma[0]) if np.isfinite(gamma[0]) else None,
        "final_fraction": float(n_e[-1] / n_e[0]) if n_e[0] > 0 else None,
    }
    if np.any(np.isfinite(gamma)):
        k = int(np.nanargmax(gamma))
        summary["peak_gamma_normalized"] = float(gamma[k])
        summary["t_peak"] = float(t[k])
    else:
        summary["peak_gamma_normalized"] = None
        summary["t_peak"] = None
    if n_e[0] > 0 and n_e[1] > 0:
        summary["initial_rate_estimate"] = float(
            instantaneous_rate(n_e[0], n_e[1], t[1] - t[0]).rate)
    else:
        summary["initial_rate_estimate"] = None
    try:
        summary["tail_rate"] = subradiant_tail(DecayTrace.from_run(trace))
    except ValueError as exc:
        summary["tail_rate"] = None
        summary["tail_rate_error"] = str(exc)
    return summary


def run(config: RunConfig, outdir=None) -> OutputBundle:
    """Execute one run and persist the bundle under `outdir`.

    Writes config.json, trace.csv, spin.csv, optional correlations.csv and
    fit outputs, analysis.json, and a manifest with sha256 hashes of every
    file.  Solver failures still write config and manifest (status
    "solver_failure") before raising SolverFailure.
    """
    out = Path(outdir if outdir is not None else config.outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    manifest = {
        "schema_version": config.schema_version,
        "package_version": __version__,
        "kind": "run",
        "label": config.label,
        "config_sha256": config.config_hash,
        "master_seed": config.master_seed,
        "solver": config.solver,
        "status": "ok",
        "error": None,
        "failures": [],
        "clamped_points": 0,
        "realization_seeds": [],
        "n_atoms": None,
    }
    try:
        trace, seeds, corr_inputs = _solve(config)
    except RuntimeError as exc:
        # Closure blow-up, integrator collapse, empty loading draws, or an
        # all-failed ensemble; partial outputs stay on disk with the reason.
        manifest["status"] = "solver_failure"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        _write_manifest(out, manifest)
        raise SolverFailure(manifest["error"]) from exc

    manifest["realization_seeds"] = [int(s) for s in seeds]
    manifest["n_atoms"] = float(trace.n_atoms)
    manifest["failures"] = [f"{r}: {msg}" for r, msg in getattr(trace, "failures", ())]
    manifest["clamped_points"] = int(getattr(trace, "clamped_points", 0))
    if manifest["failures"]:
        manifest["status"] = "partial"

    meta = {
        "label": config.label, "solver": config.solver,
        "closure_alpha": config.closure_alpha, "n_atoms": float(trace.n_atoms),
        "realizations": config.realizations, "time_unit": "tau",
        "rate_unit": "gamma0", "wavelength_nm": config.wavelength_nm,
        "lifetime_us": config.lifetime_us,
    }
    cols = _trace_columns(trace)
    write_table(out / "trace.csv", cols, meta)
    s_tot = np.sqrt(np.maximum(cols["m_perp_sq"], 0.0) + cols["s_z"] ** 2)
    write_table(out / "spin.csv",
                {"t": cols["t"], "s_z": cols["s_z"], "m_perp_sq": cols["m_perp_sq"],
                 "s_tot": s_tot},
                {"label": config.label, "n_atoms": float(trace.n_atoms)})

    if corr_inputs:
        rows = {"time": [], "dr": [], "dc": [], "c_d": [], "pairs": []}
        for t in sorted(corr_inputs):
            array, pops, pair_pops = corr_inputs[t]
            cmap = connected_correlations(array, pair_populations=pair_pops,
                                          populations=pops,
                                          center_fraction=CORRELATION_CENTER_FRACTION)
            for (dr, dc), v, n_d in zip(cmap.displacements, cmap.values,
                                        cmap.pair_counts):
                rows["time"].append(t)
                rows["dr"].append(int(dr))
                rows["dc"].append(int(dc))
                rows["c_d"].append(float(v))
                rows["pairs"].append(int(n_d))
        write_table(out / "correlations.csv", rows,
                    {"center_fraction": CORRELATION_CENTER_FRACTION,
                     "label": config.label})

    analysis = _analysis_summary(trace)
    if config.fit_terms:
        try:
            fit = fit_stretched(DecayTrace.from_run(trace), config.fit_terms,
                                window=config.fit_window,
                                n_resamples=config.fit_resamples,
                                seed=config.master_seed)
            (out / "fit_report.txt").write_text(fit.report() + "\n")
            fit_cols = {"t": fit.times, "model": fit.model(fit.times),
                        "residual": fit.residuals}
            if fit.curve_std is not None:
                fit_cols["curve_std"] = fit.curve_std
            write_table(out / "fit_curve.csv", fit_cols, {"label": config.label})
            analysis["fit"] = {
                "terms": [list(term) for term in fit.model.terms],
                "rms_residual": fit.rms_residual,
                "n_resamples": fit.n_resamples,
            }
        except (RuntimeError, ValueError) as exc:
            analysis["fit"] = None
            analysis["fit_error"] = str(exc)
            manifest["status"] = "partial"
    _write_json(out / "analysis.json", analysis)

    _write_manifest(out, manifest)
    return OutputBundle(outdir=out, manifest=manifest, trace=trace, analysis=analysis)


# ------------------------------------------------------------------ sweep

def _sweep_point(args) -> dict:
    """Run one sweep point in isolation; never raises (status in the row).

    The point config is built here, inside the worker, so that a value the
    per-run validation rejects still only fails its own row.
    """
    sweep_json, index, point_dir, axis, value = args
    row = {"value": value, "status": "ok", "error": None, "n_atoms": None,
           "peak_gamma_normalized": None, "t_peak": None,
           "initial_gamma_normalized": None, "initial_rate_estimate": None,
           "tail_rate": None, "final_fraction": None,
           "peak_rate_per_atom": None, "resonance_deviation": None}
    try:
        # The persisted point config records a bundle-relative outdir so a
        # verification re-run in another directory is byte-identical.
        config = SweepConfig.from_json(sweep_json).point_config(
            index, f"points/{index:03d}")
        bundle = run(config, outdir=point_dir)
        trace = bundle.trace
        row["n_atoms"] = float(trace.n_atoms)
        for key in ("peak_gamma_normalized", "t_peak", "initial_gamma_normalized",
                    "initial_rate_estimate", "tail_rate", "final_fraction"):
            row[key] = bundle.analysis.get(key)
        rate = np.asarray(trace.emission_rate, float)
        row["peak_rate_per_atom"] = float(np.max(rate) / trace.n_atoms)
        if axis == "spacing":
            row["resonance_deviation"] = resonance_deviation(
                DecayTrace.from_run(trace), tau0=1.0)
    except Exception as exc:  # isolation: one bad point must not sink the sweep
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _loglog_exponent(x, y, master_seed: int, resamples: int = 1000) -> dict:
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope = float(np.polyfit(lx, ly, 1)[0])
    rng = rng_for(master_seed, STREAM_BOOTSTRAP)
    boot = []
    for _ in range(resamples):
        idx = rng.integers(0, len(lx), size=len(lx))
        if np.unique(lx[idx]).size < 2:
            continue
        boot.append(np.polyfit(lx[idx], ly[idx], 1)[0])
    lo, hi = np.percentile(boot, [16, 84]) if boot else (math.nan, math.nan)
    return {"exponent": slope, "ci16": float(lo), "ci84": float(hi),
            "n_points": int(len(lx))}


def sweep(sweep_config: SweepConfig, outdir=None, workers: int | None = None) -> OutputBundle:
    """Run every sweep point, post-process along the axis, persist the table.

    Points run in isolation (a failing point is recorded, not propagated) and
    concurrently when `workers` > 1.  Post-processing: atom_number fits the
    log-log scaling exponents of the peak normalized rate and the peak
    per-atom rate (needs >= 4 successful points); spacing attaches a
    resonance deviation per point; disorder_sigma adds jump-spectrum
    percentiles via spectrum_scan; excitation_fraction reports initial rate
    and surviving tail fraction per point.
    """
    base = sweep_config.base
    out = Path(outdir if outdir is not None else base.outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_config.json").write_text(sweep_config.to_json())
    workers = sweep_config.workers if workers is None else workers

    sweep_json = sweep_config.to_json()
    tasks = [(sweep_json, i, str(out / "points" / f"{i:03d}"), sweep_config.axis,
              float(value)) for i, value in enumerate(sweep_config.values)]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, tasks))
    else:
        rows = [_sweep_point(task) for task in tasks]

    summary: dict = {"axis": sweep_config.axis, "values": list(sweep_config.values),
                     "failed_points": [i for i, r in enumerate(rows)
                                       if r["status"] != "ok"],
                     "errors": {str(i): r["error"] for i, r in enumerate(rows)
                                if r["error"]}}
    good = [r for r in rows if r["status"] == "ok"]

    if sweep_config.axis == "atom_number":
        if len(good) >= 4:
            n_vals = [r["value"] for r in good]
            summary["exponent_peak_gamma"] = _loglog_exponent(
                n_vals, [r["peak_gamma_normalized"] for r in good], base.master_seed)
            summary["exponent_peak_rate_per_atom"] = _loglog_exponent(
                n_vals, [r["peak_rate_per_atom"] for r in good], base.master_seed)
        else:
            summary["error"] = (f"scaling-exponent fit needs >= 4 successful points, "
                                f"got {len(good)}")
    elif sweep_config.axis == "disorder_sigma":
        spectra = {"var_rate_median": [], "var_rate_p25": [], "var_rate_p75": [],
                   "max_rate_median": [], "max_rate_p25": [], "max_rate_p75": []}
        for i, row in enumerate(rows):
            try:
                scan = spectrum_scan(base.lattice_spec(), [base.spacing],
                                     DisorderSpec(sigma=row["value"],
                                                  in_plane_only=base.disorder_in_plane_only),
                                     realizations=base.realizations,
                                     master_seed=base.master_seed)
                for key in spectra:
                    spectra[key].append(float(scan[key][0]))
            except (RuntimeError, ValueError) as exc:
                for key in spectra:
                    spectra[key].append(math.nan)
                summary["errors"][str(i)] = (summary["errors"].get(str(i), "") +
                                             f" spectrum_scan: {exc}").strip()
        summary["spectrum_percentiles"] = spectra
        for key, vals in spectra.items():
            for row, v in zip(rows, vals):
                row[key] = v

    col_names = ["value", "n_atoms", "peak_gamma_normalized", "t_peak",
                 "initial_gamma_normalized", "initial_rate_estimate", "tail_rate",
                 "final_fraction", "peak_rate_per_atom"]
    if sweep_config.axis == "spacing":
        col_names.append("resonance_deviation")
    if sweep_config.axis == "disorder_sigma":
        col_names += ["var_rate_median", "var_rate_p25", "var_rate_p75",
                      "max_rate_median", "max_rate_p25", "max_rate_p75"]
    # Failure messages live in sweep_summary.json; the table format is
    # whitespace-separated and must stay free of free-form text.
    table = {name: [row.get(name) if row.get(name) is not None else math.nan
                    for row in rows] for name in col_names}
    table["status"] = [row["status"] for row in rows]
    write_table(out / "sweep.csv", table,
                {"axis": sweep_config.axis, "label": base.label,
                 "seed_policy": sweep_config.seed_policy})
    _write_json(out / "sweep_summary.json", summary)

    manifest = {
        "schema_version": sweep_config.schema_version,
        "package_version": __version__,
        "kind": "sweep",
        "label": base.label,
        "config_sha256": sweep_config.config_hash,
        "master_seed": base.master_seed,
        "solver": base.solver,
        "status": "ok" if not summary["failed_points"] else "partial",
        "error": None,
        "axis": sweep_config.axis,
    }
    _write_manifest(out, manifest)
    return OutputBundle(outdir=out, manifest=manifest, analysis=summary)


# ----------------------------------------------------------------- verify

def verify(outdir, rerun: bool = True) -> dict:
    """Check a persisted bundle: file hashes, and optionally a re-run.

    The tamper check recomputes the sha256 of every file in the manifest.
    With `rerun`, the persisted config is executed again into a temporary
    directory and every file of the fresh bundle must hash identically to
    the original (byte-level reproducibility).  Raises VerificationError
    with the list of mismatches.
    """
    out = Path(outdir)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError("no manifest.json found", str(out))
    manifest = json.loads(manifest_path.read_text())
    mismatches = []
    for rel, expect in manifest.get("files", {}).items():
        p = out / rel
        if not p.exists():
            mismatches.append(f"missing file: {rel}")
        elif _sha256(p) != expect:
            mismatches.append(f"hash mismatch: {rel}")

    checked_rerun = False
    if rerun and manifest.get("status") in ("ok", "partial"):
        checked_rerun = True
        with tempfile.TemporaryDirectory() as tmp:
            try:
                if manifest.get("kind") == "sweep":
                    fresh = sweep(SweepConfig.load(out / "sweep_config.json"),
                                  outdir=tmp, workers=1)
                else:
                    fresh = run(RunConfig.load(out / "config.json"), outdir=tmp)
            except SolverFailure as exc:
                fresh = None
                mismatches.append(f"re-run failed: {exc}")
            if fresh is not None:
                recorded = manifest.get("files", {})
                for rel, h_new in fresh.manifest["files"].items():
                    h_old = recorded.get(rel)
                    if h_old is None:
                        mismatches.append(f"re-run produced unrecorded file: {rel}")
                    elif h_old != h_new:
                        mismatches.append(f"re-run differs: {rel}")
    if mismatches:
        raise VerificationError(mismatches)
    return {"files_checked": len(manifest.get("files", {})), "rerun": checked_rerun}


# ------------------------------------------------------------- plot data

def _require_outputs(outdir: Path, names) -> None:
    missing = [name for name in names if not (outdir / name).exists()]
    if missing:
        raise MissingOutputsError(missing)


def emit_plot_data(outdir, preset: str) -> list:
    """Write plot-ready columnar files for one phenomenon preset.

    Presets: decay (population vs time), rate (normalized rate vs time),
    correlations (one displacement grid per snapshot time), scaling
    (peak rate vs atom number with fitted exponent), spacing (resonance
    deviation vs lattice constant), spin_ssz (collective-spin trajectory
    plus the analytic independent-decay reference).  Returns the written
    paths; plot files are appended to the bundle manifest.
    """
    out = Path(outdir)
    if preset not in PLOT_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PLOT_PRESETS}",
                          "preset")
    plots = out / "plots"
    written: list[Path] = []

    if preset in ("decay", "rate"):
        _require_outputs(out, ["trace.csv"])
        cols, meta = read_table(out / "trace.csv")
        plots.mkdir(exist_ok=True)
        if preset == "decay":
            data = {"t": cols["t"], "n_excited": cols["n_excited"]}
            if "stderr_n_excited" in cols:
                data["stderr"] = cols["stderr_n_excited"]
            path = plots / "decay.csv"
            write_table(path, data, {"xlabel": "t/tau", "ylabel": "n_excited",
                                     "label": meta.get("label", "")})
        else:
            path = plots / "rate.csv"
            write_table(path, {"t": cols["t"], "gamma_normalized": cols["gamma_normalized"]},
                        {"xlabel": "t/tau", "ylabel": "gamma/gamma0",
                         "label": meta.get("label", "")})
        written.append(path)

    elif preset == "correlations":
        _require_outputs(out, ["correlations.csv"])
        cols, _ = read_table(out / "correlations.csv")
        plots.mkdir(exist_ok=True)
        times = np.unique(cols["time"])
        for k, t in enumerate(times):
            sel = cols["time"] == t
            dr = cols["dr"][sel].astype(int)
            dc = cols["dc"][sel].astype(int)
            val = cols["c_d"][sel]
            dr_axis = np.unique(dr)
            dc_axis = np.unique(dc)
            grid = np.full((dr_axis.size, dc_axis.size), np.nan)
            grid[np.searchsorted(dr_axis, dr), np.searchsorted(dc_axis, dc)] = val
            data = {"dr": dr_axis}
            for j, dcol in enumerate(dc_axis):
                data[f"c[{dcol}]"] = grid[:, j]
            path = plots / f"correlations_{k:02d}.csv"
            write_table(path, data, {"time": float(t), "xlabel": "dc", "ylabel": "dr"})
            written.append(path)

    elif preset in ("scaling", "spacing"):
        _require_outputs(out, ["sweep.csv", "sweep_summary.json"])
        cols, _ = read_table(out / "sweep.csv")
        summary = json.loads((out / "sweep_summary.json").read_text())
        axis = summary.get("axis")
        want = "atom_number" if preset == "scaling" else "spacing"
        if axis != want:
            raise MissingOutputsError([f"sweep over {want} (bundle has {axis})"])
        plots.mkdir(exist_ok=True)
        if preset == "scaling":
            meta = {"xlabel": "n_atoms", "ylabel": "peak rate"}
            for key in ("exponent_peak_gamma", "exponent_peak_rate_per_atom"):
                if key in summary:
                    meta[key] = summary[key]["exponent"]
                    meta[key + "_ci16"] = summary[key]["ci16"]
                    meta[key + "_ci84"] = summary[key]["ci84"]
            path = plots / "scaling.csv"
            write_table(path, {"n_atoms": cols["value"],
                               "peak_gamma_normalized": cols["peak_gamma_normalized"],
                               "peak_rate_per_atom": cols["peak_rate_per_atom"]}, meta)
        else:
            path = plots / "spacing.csv"
            write_table(path, {"spacing": cols["value"],
                               "resonance_deviation": cols["resonance_deviation"],
                               "peak_gamma_normalized": cols["peak_gamma_normalized"]},
                        {"xlabel": "spacing/lambda", "ylabel": "max (g - f)/g"})
        written.append(path)

    else:  # spin_ssz
        _require_outputs(out, ["spin.csv", "config.json"])
        cols, meta = read_table(out / "spin.csv")
        config = RunConfig.load(out / "config.json")
        n = float(meta["n_atoms"])
        plots.mkdir(exist_ok=True)
        path = plots / "spin_ssz.csv"
        write_table(path, {"t": cols["t"], "s_z_over_n": cols["s_z"] / n,
                           "s_tot_over_n": cols["s_tot"] / n},
                    {"xlabel": "S_z/N", "ylabel": "S_tot/N", "n_atoms": n})
        written.append(path)
        theta = (math.pi / 2 if config.initial_state == "inverted"
                 else math.asin(math.sqrt(config.excitation_fraction)))
        t_grid = np.linspace(0.0, 1.0, 101)
        n_ref = max(int(round(n)), 1)
        s_z_ref, s_tot_sq_ref = analytic_independent_spin(theta, n_ref, t_grid)
        ref_path = plots / "spin_ssz_reference.csv"
        write_table(ref_path,
                    {"transmitted": t_grid, "s_z_over_n": s_z_ref / n_ref,
                     "s_tot_over_n": np.sqrt(s_tot_sq_ref) / n_ref},
                    {"note": "independent-decay reference; s_tot is the full "
                             "second moment sqrt(<S^2>)",
                     "theta": theta, "n_atoms": n_ref})
        written.append(ref_path)

    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        _write_manifest(out, manifest)
    return written
