"""Photon-mediated coupling matrices from the vacuum Green's tensor.

Core units: the transition wavelength is 1 (so k = 2*pi), the single-atom
decay rate gamma0 is 1, and time is measured in 1/gamma0.  For a pair of
identical dipoles d at separation r the coherent and dissipative couplings
follow from the contracted tensor,

    J_ij - i*Gamma_ij/2 = -(3*pi*gamma0/omega0) * d^dag G(r) d,  omega0 = 2*pi,

so J_ij = -1.5*gamma0*Re(d^dag G d) and Gamma_ij = 3*gamma0*Im(d^dag G d).
The overall scale and sign are pinned operationally by two limits checked in
the test suite: Gamma_ii -> gamma0 as r -> 0, and the symmetric mode of a
co-located pair decays faster than gamma0 (superradiant).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import (
    AtomArray,
    DisorderSpec,
    EmptyRealizationError,
    LatticeSpec,
    build_array,
    dipole_vector,
)
from .seeding import STREAM_ENSEMBLE, STREAM_MOTION, derive_seed
from .tableio import _fmt

K_WAVE = 2.0 * np.pi
_PAIR_CHUNK = 64


@dataclass(frozen=True)
class MotionSpec:
    """Gaussian motional wavepackets, widths per trap axis in units of lambda.

    Axis order is (drive axis in plane, in-plane perpendicular, z).  Each atom
    independently occupies the first excited band along the drive axis with
    probability `excited_band_probability`; its position density along that
    axis then carries the first-excited-state weight x^2 exp(-x^2/2w^2).
    Averaging assumes the trap period is much shorter than the decay dynamics
    (frozen-Gaussian limit); this is not checked.
    """

    widths: tuple[float, float, float] = (0.05, 0.05, 0.1)
    excited_band_probability: float = 0.06
    samples: int = 20_000
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) != 3 or any(w < 0 for w in self.widths):
            raise ValueError("widths must be three values >= 0")
        if not 0.0 <= self.excited_band_probability <= 1.0:
            raise ValueError("excited_band_probability must lie in [0, 1]")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")

    @property
    def is_point(self) -> bool:
        return all(w == 0 for w in self.widths)


@dataclass(frozen=True)
class CouplingMatrices:
    """Coherent (J) and dissipative (Gamma) coupling matrices, units of gamma0."""

    J: np.ndarray
    Gamma: np.ndarray
    gamma0: float = 1.0

    def __post_init__(self):
        J, G = np.asarray(self.J, float), np.asarray(self.Gamma, float)
        n = J.shape[0]
        if J.shape != (n, n) or G.shape != (n, n):
            raise ValueError("J and Gamma must be square matrices of equal size")
        tol = 1e-12 * self.gamma0
        if not (np.abs(J - J.T).max() <= tol and np.abs(G - G.T).max() <= tol):
            raise ValueError("J and Gamma must be symmetric")
        if np.abs(np.diag(J)).max() > tol:
            raise ValueError("J must have zero diagonal")
        if np.abs(np.diag(G) - self.gamma0).max() > 1e-12 * self.gamma0:
            raise ValueError("Gamma diagonal must equal gamma0")
        if np.abs(G).max() > self.gamma0 * (1 + 1e-9):
            raise ValueError("|Gamma_ij| must not exceed gamma0")
        if np.linalg.eigvalsh(G).min() < -1e-9 * n * self.gamma0:
            raise ValueError("Gamma must be positive semidefinite")

    @property
    def n_atoms(self) -> int:
        return self.J.shape[0]


@dataclass(frozen=True)
class JumpSpectrum:
    """Collective jump-mode decay rates (descending) and orthonormal modes.

    modes[:, k] is the eigenvector of Gamma belonging to rates[k]; the first
    component of each mode exceeding 1e-12 in magnitude is made positive so
    the decomposition is deterministic under degeneracy.
    """

    rates: np.ndarray
    modes: np.ndarray

    def __post_init__(self):
        r, m = self.rates, self.modes
        if np.any(np.diff(r) > 0):
            raise ValueError("rates must be sorted descending")
        gram = m.T @ m
        if np.abs(gram - np.eye(len(r))).max() > 1e-10:
            raise ValueError("modes must be orthonormal")


def green_tensor(r) -> np.ndarray:
    """Free-space dyadic Green's tensor at separation r (units of lambda).

    G(r) = e^{ikr}/(4 pi r) [ (1 + i/(kr) - 1/(kr)^2) I
                              + (-1 - 3i/(kr) + 3/(kr)^2) rhat rhat ],  k = 2 pi.
    """
    r = np.asarray(r, dtype=float)
    rn = float(np.linalg.norm(r))
    if rn == 0.0:
        raise ValueError("green_tensor requires |r| > 0 (use the Dicke branch for r = 0)")
    u = K_WAVE * rn
    rhat = r / rn
    p = 1.0 + 1j / u - 1.0 / u**2
    q = -1.0 - 3j / u + 3.0 / u**2
    return np.exp(1j * u) / (4 * np.pi * rn) * (p * np.eye(3) + q * np.outer(rhat, rhat))


def _pair_values(rvec: np.ndarray, e_dip: np.ndarray, gamma0: float):
    """(J, Gamma) for separation vectors of shape (..., 3), vectorized.

    Uses the contracted form e^dag G e = e^{iu}/(4 pi r) (P + Q |rhat . e|^2),
    which avoids materializing the 3x3 tensor per pair.
    """
    rn = np.sqrt(np.sum(rvec * rvec, axis=-1))
    u = K_WAVE * rn
    dot = rvec @ e_dip
    proj = (dot.real**2 + dot.imag**2) / rn**2
    p = 1.0 + 1j / u - 1.0 / u**2
    q = -1.0 - 3j / u + 3.0 / u**2
    g = np.exp(1j * u) / (4 * np.pi * rn) * (p + q * proj)
    return -1.5 * gamma0 * g.real, 3.0 * gamma0 * g.imag


def _motional_tables(n_atoms: int, motion: MotionSpec, beam_axis) -> np.ndarray:
    """Per-atom displacement samples, shape (n_atoms, samples, 3), lab frame.

    All pairs share these per-atom tables, so every pair average is an average
    over common atomic configurations; the averaged Gamma is then a mean of
    positive-semidefinite matrices and stays positive semidefinite.
    """
    b = np.asarray(beam_axis, dtype=float)
    u1 = np.array([b[0], b[1], 0.0])
    nrm = np.linalg.norm(u1)
    u1 = u1 / nrm if nrm > 1e-12 else np.array([1.0, 0.0, 0.0])
    u3 = np.array([0.0, 0.0, 1.0])
    u2 = np.cross(u3, u1)
    frame = np.array([u1, u2, u3])

    rng = np.random.default_rng(derive_seed(motion.seed, STREAM_MOTION))
    excited = rng.random(n_atoms) < motion.excited_band_probability
    axis_samples = np.empty((n_atoms, motion.samples, 3))
    for ax, w in enumerate(motion.widths):
        axis_samples[:, :, ax] = rng.normal(0.0, w, size=(n_atoms, motion.samples))
    # First motional band along the drive axis: density x^2 exp(-x^2/2w^2),
    # i.e. w * sqrt(chi^2_3) with a random sign.  Drawn for every atom so the
    # stream layout does not depend on the Bernoulli outcome.
    chi = rng.chisquare(3, size=(n_atoms, motion.samples))
    sign = rng.integers(0, 2, size=(n_atoms, motion.samples)) * 2 - 1
    band1 = motion.widths[0] * np.sqrt(chi) * sign
    axis_samples[excited, :, 0] = band1[excited]
    return axis_samples @ frame


def coupling_matrices(array: AtomArray, motion: MotionSpec | None = None,
                      gamma0: float = 1.0) -> CouplingMatrices:
    """Build J and Gamma for one array realization.

    With `motion`, each off-diagonal pair value is the Monte Carlo average of
    the point-atom formula over the pair's relative displacement (per-axis
    variance equal to the sum of the two atoms' variances, since the samples
    are independent per atom); the diagonal is untouched, so the trace
    identity sum_k Gamma_k = N gamma0 survives averaging.
    """
    n = array.n_atoms
    e_dip = dipole_vector(array.drive)

    if array.dicke:
        return CouplingMatrices(J=np.zeros((n, n)),
                                Gamma=gamma0 * np.ones((n, n)), gamma0=gamma0)

    J = np.zeros((n, n))
    G = np.zeros((n, n))
    np.fill_diagonal(G, gamma0)
    if n == 1:
        return CouplingMatrices(J=J, Gamma=G, gamma0=gamma0)

    pos = array.atom_positions
    iu, ju = np.triu_indices(n, 1)
    sep = pos[iu] - pos[ju]
    if np.min(np.linalg.norm(sep, axis=1)) < 1e-9:
        raise ValueError("duplicate atom positions (co-location is Dicke-only)")

    if motion is None or motion.is_point:
        jv, gv = _pair_values(sep, e_dip, gamma0)
    else:
        tables = _motional_tables(n, motion, array.drive.beam_axis)
        jv = np.empty(len(iu))
        gv = np.empty(len(iu))
        for lo in range(0, len(iu), _PAIR_CHUNK):
            sl = slice(lo, min(lo + _PAIR_CHUNK, len(iu)))
            rel = sep[sl, None, :] + tables[iu[sl]] - tables[ju[sl]]
            jc, gc = _pair_values(rel, e_dip, gamma0)
            jv[sl] = jc.mean(axis=1)
            gv[sl] = gc.mean(axis=1)

    J[iu, ju] = J[ju, iu] = jv
    G[iu, ju] = G[ju, iu] = gv
    return CouplingMatrices(J=J, Gamma=G, gamma0=gamma0)


def jump_spectrum(couplings: CouplingMatrices) -> JumpSpectrum:
    """Diagonalize Gamma into collective jump modes, rates descending."""
    vals, vecs = np.linalg.eigh(couplings.Gamma)
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    for k in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, k]) > 1e-12)
        if nz.size and vecs[nz[0], k] < 0:
            vecs[:, k] = -vecs[:, k]
    return JumpSpectrum(rates=vals, modes=vecs)


def spectrum_scan(spec: LatticeSpec, spacings, disorder: DisorderSpec,
                  realizations: int, master_seed: int = 0,
                  max_retries: int = 20) -> dict[str, np.ndarray]:
    """Order statistics of the jump spectrum versus lattice spacing.

    For each spacing, `realizations` disordered arrays are drawn with seeds
    derived from `master_seed` (realization r reuses the same derived seed at
    every spacing, so curves share randomness across the scan axis).  Reports
    the 25th/50th/75th percentiles of Var(Gamma_k) and of the brightest rate.
    Empty loadings are resampled with fresh derived seeds up to `max_retries`
    times before the rejection propagates.  `disorder.seed` is ignored here:
    displacements must differ per realization.
    """
    if realizations < 1:
        raise ValueError("realizations must be >= 1")
    spacings = np.asarray(list(spacings), dtype=float)
    out = {
        "spacing": spacings,
        "var_rate_p25": np.empty_like(spacings),
        "var_rate_median": np.empty_like(spacings),
        "var_rate_p75": np.empty_like(spacings),
        "max_rate_p25": np.empty_like(spacings),
        "max_rate_median": np.empty_like(spacings),
        "max_rate_p75": np.empty_like(spacings),
    }
    dis = replace(disorder, seed=None)
    for col, a in enumerate(spacings):
        cell = replace(spec, spacing=float(a))
        var_k = np.empty(realizations)
        max_k = np.empty(realizations)
        for r in range(realizations):
            for attempt in range(max_retries + 1):
                seed = derive_seed(master_seed, STREAM_ENSEMBLE,
                                   r + attempt * realizations)
                try:
                    arr = build_array(cell, disorder=dis, seed=seed)
                    break
                except EmptyRealizationError:
                    if attempt == max_retries:
                        raise
            spectrum = jump_spectrum(coupling_matrices(arr))
            var_k[r] = np.var(spectrum.rates)
            max_k[r] = spectrum.rates[0]
        out["var_rate_p25"][col], out["var_rate_median"][col], out["var_rate_p75"][col] = \
            np.percentile(var_k, [25, 50, 75])
        out["max_rate_p25"][col], out["max_rate_median"][col], out["max_rate_p75"][col] = \
            np.percentile(max_k, [25, 50, 75])
    return out


def find_local_maxima(xs, values) -> list[float]:
    """Interior local maxima of a sampled curve (plateaus report their left edge)."""
    xs = np.asarray(xs, float)
    values = np.asarray(values, float)
    out = []
    for i in range(1, len(xs) - 1):
        if values[i] > values[i - 1] and values[i] >= values[i + 1]:
            out.append(float(xs[i]))
    return out


def resonance_onsets(xs, values) -> list[float]:
    """Spacings where the curve rises fastest (midpoints of max first difference).

    A new Bragg channel opens exactly at the commensurate spacing, so the
    scanned curve shows a sharp rise there; its steepest points locate the
    resonances.  The local maxima of the curve itself sit above the onset
    because the resonant bump rides a decaying baseline.
    """
    xs = np.asarray(xs, float)
    values = np.asarray(values, float)
    slope = np.diff(values)
    mids = 0.5 * (xs[1:] + xs[:-1])
    out = []
    for i in range(1, len(slope) - 1):
        if slope[i] > 0 and slope[i] > slope[i - 1] and slope[i] >= slope[i + 1]:
            out.append(float(mids[i]))
    return out


def coupling_cache_key(array: AtomArray, motion: MotionSpec | None = None,
                       gamma0: float = 1.0) -> str:
    """Content hash identifying (array, motion, gamma0) for the binary cache."""
    h = hashlib.sha256()
    h.update(b"dicke" if array.dicke else b"lattice")
    h.update(np.ascontiguousarray(array.atom_positions, dtype=np.float64).tobytes())
    h.update(np.asarray(array.drive.quantization_axis, dtype=np.float64).tobytes())
    h.update(np.asarray(array.drive.beam_axis, dtype=np.float64).tobytes())
    h.update(array.drive.polarization.encode())
    h.update(repr(float(gamma0)).encode())
    if motion is None or motion.is_point:
        h.update(b"point")
    else:
        h.update(repr((tuple(float(w) for w in motion.widths),
                       float(motion.excited_band_probability),
                       int(motion.samples), int(motion.seed))).encode())
    return h.hexdigest()


def cached_coupling_matrices(array: AtomArray, motion: MotionSpec | None = None,
                             cache_dir=None, gamma0: float = 1.0) -> CouplingMatrices:
    """coupling_matrices with an npz cache keyed by content hash."""
    if cache_dir is None:
        return coupling_matrices(array, motion, gamma0)
    path = Path(cache_dir) / f"couplings-{coupling_cache_key(array, motion, gamma0)}.npz"
    if path.exists():
        with np.load(path) as data:
            return CouplingMatrices(J=data["J"], Gamma=data["Gamma"],
                                    gamma0=float(data["gamma0"]))
    cm = coupling_matrices(array, motion, gamma0)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, J=cm.J, Gamma=cm.Gamma, gamma0=cm.gamma0)
    return cm


def write_couplings_text(path, couplings: CouplingMatrices) -> None:
    """Dump J and Gamma as dense plain-text blocks (round-trip exact)."""
    lines = [f"# gamma0 = {_fmt(couplings.gamma0)}",
             f"# n_atoms = {couplings.n_atoms}"]
    for name, mat in (("J", couplings.J), ("Gamma", couplings.Gamma)):
        lines.append(f"# matrix = {name}")
        lines.extend(" ".join(_fmt(v) for v in row) for row in mat)
    Path(path).write_text("\n".join(lines) + "\n")


def read_couplings_text(path) -> CouplingMatrices:
    """Inverse of write_couplings_text."""
    gamma0 = 1.0
    blocks: dict[str, list[list[float]]] = {}
    current: list[list[float]] | None = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, _, val = (s.strip() for s in body.partition("="))
                if key == "gamma0":
                    gamma0 = float(val)
                elif key == "matrix":
                    current = blocks.setdefault(val, [])
            continue
        if current is None:
            raise ValueError("matrix rows before any '# matrix =' header")
        current.append([float(tok) for tok in line.split()])
    try:
        return CouplingMatrices(J=np.array(blocks["J"]),
                                Gamma=np.array(blocks["Gamma"]), gamma0=gamma0)
    except KeyError as err:
        raise ValueError(f"missing matrix block {err} in {path}") from None
