"""Exact Lindblad master-equation integrator on the full 2^N Hilbert space.

Ground truth for every approximate solver in this package.  Works in the
rotating frame at the transition frequency (the fast optical term is dropped;
dynamics depend only on J and Gamma):

    drho/dt = -i[H, rho] + sum_ij (Gamma_ij/2) (2 s_j rho s_i^dag
                                                - {s_i^dag s_j, rho}),
    H = sum_{i != j} J_ij s_i^dag s_j,

with s_i the lowering operator of atom i.  Basis ordering: computational index
x encodes occupations bitwise, atom 0 in the least significant bit, bit 1
meaning excited.  The RHS is evaluated as -i(A rho - (A rho)^dag) + recycle
with A = H - (i/2) sum_ij Gamma_ij s_i^dag s_j, which keeps rho Hermitian
through every Runge-Kutta stage; the recycle term is applied through strided
tensor views, so no superoperator matrix is ever materialized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache, reduce
from pathlib import Path

import numpy as np
from scipy.integrate import DOP853
from scipy.sparse import csr_matrix

from .couplings import CouplingMatrices
from .geometry import AtomArray
from .seeding import STREAM_SHOTS, rng_for
from .tableio import _fmt

DEFAULT_ATOM_CAP = 12


class IntegrationFailureError(RuntimeError):
    """Integrator step failure (step-size collapse), with the failure time."""

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class InitialStateSpec:
    """Product initial state, either an incoherent mixture or a pulsed pure state.

    coherent=False: each atom is excited independently with probability
    `excitation_probability`; no coherences.
    coherent=True: each atom is in cos(theta/2)|g> + e^{i phi_i} sin(theta/2)|e>
    with phi_i = 2*pi * phase_gradient . r_i + phase_offset (phase_gradient in
    units of 2*pi/lambda, i.e. a unit vector is a resonant photon momentum).
    """

    mode: str = "product"
    coherent: bool = False
    excitation_probability: float | None = None
    rotation_angle: float | None = None
    phase_gradient: tuple[float, float, float] | None = None
    phase_offset: float = 0.0

    def __post_init__(self):
        if self.mode != "product":
            raise ValueError(f"unknown initial-state mode {self.mode!r}")
        if self.coherent:
            if self.rotation_angle is None:
                raise ValueError("coherent state needs rotation_angle")
            if self.excitation_probability is not None:
                implied = np.sin(self.rotation_angle / 2) ** 2
                if abs(self.excitation_probability - implied) > 1e-12:
                    raise ValueError(
                        "excitation_probability inconsistent with rotation_angle; "
                        "leave it unset for coherent states")
        else:
            p = self.excitation_probability
            if p is None or not 0.0 <= p <= 1.0:
                raise ValueError("incoherent state needs excitation_probability in [0, 1]")
            if self.rotation_angle is not None:
                raise ValueError("rotation_angle only applies to coherent states")
            if self.phase_gradient is not None or self.phase_offset != 0.0:
                raise ValueError("phases only apply to coherent states")

    @property
    def p_excited(self) -> float:
        if self.coherent:
            return float(np.sin(self.rotation_angle / 2) ** 2)
        return float(self.excitation_probability)

    @classmethod
    def fully_inverted(cls) -> "InitialStateSpec":
        return cls(excitation_probability=1.0)

    @classmethod
    def incoherent(cls, p: float) -> "InitialStateSpec":
        return cls(excitation_probability=float(p))

    @classmethod
    def coherent_pulse(cls, theta: float, k_laser=None,
                       phase_offset: float = 0.0) -> "InitialStateSpec":
        kl = None if k_laser is None else tuple(float(c) for c in k_laser)
        return cls(coherent=True, rotation_angle=float(theta),
                   phase_gradient=kl, phase_offset=float(phase_offset))


@dataclass(frozen=True)
class ExactTrajectory:
    """Observable stream from one exact integration (plus optional snapshots)."""

    times: np.ndarray              # (T,)
    populations: np.ndarray        # (T, N) real <n_i>
    coherences: np.ndarray         # (T, N, N) complex <s_i^dag s_j>
    pair_populations: np.ndarray   # (T, N, N) real <n_i n_j>, diagonal <n_i>
    emission_rate: np.ndarray      # (T,) sum_ij Gamma_ij <s_i^dag s_j>
    snapshots: dict
    n_atoms: int

    @property
    def n_excited(self) -> np.ndarray:
        return self.populations.sum(axis=1)

    @property
    def s_z(self) -> np.ndarray:
        return self.n_excited - self.n_atoms / 2

    @property
    def m_perp_sq(self) -> np.ndarray:
        n = self.n_atoms
        off = self.coherences.real.sum(axis=(1, 2)) - np.einsum(
            "tii->t", self.coherences.real)
        return n / 2 + off

    @property
    def s_z_sq(self) -> np.ndarray:
        nn_sum = self.pair_populations.sum(axis=(1, 2))
        ne = self.n_excited
        return nn_sum - self.n_atoms * ne + self.n_atoms**2 / 4

    def observable_columns(self, include_pair_populations: bool = False):
        cols = {
            "t": self.times,
            "n_excited": self.n_excited,
            "emission_rate": self.emission_rate,
            "s_z": self.s_z,
            "m_perp_sq": self.m_perp_sq,
        }
        if include_pair_populations:
            for i in range(self.n_atoms):
                for j in range(i, self.n_atoms):
                    cols[f"nn_{i}_{j}"] = self.pair_populations[:, i, j]
        return cols


@lru_cache(maxsize=8)
class _Operators:
    """Index machinery for N atoms: bit table and coherence gather lists."""

    def __init__(self, n: int):
        self.n = n
        self.dim = 1 << n
        x = np.arange(self.dim)
        self.bits = ((x[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
        # <s_i^dag s_j> = sum over x with bit_i = 1, bit_j = 0 of rho[x - 2^i + 2^j, x]
        self.coh_cols = {}
        self.coh_rows = {}
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                sel = x[((x >> i) & 1 == 1) & ((x >> j) & 1 == 0)]
                self.coh_cols[i, j] = sel
                self.coh_rows[i, j] = sel - (1 << i) + (1 << j)

    def effective_hamiltonian(self, couplings: CouplingMatrices) -> csr_matrix:
        """A = H - (i/2) K as a sparse matrix (see module docstring)."""
        g = couplings.J - 0.5j * couplings.Gamma
        rows, cols, vals = [], [], []
        for i in range(self.n):
            for j in range(self.n):
                if i == j:
                    continue
                c = self.coh_cols[j, i]  # bit_j = 1, bit_i = 0: s_i^dag s_j acts
                rows.append(c - (1 << j) + (1 << i))
                cols.append(c)
                vals.append(np.full(len(c), g[i, j]))
        x = np.arange(self.dim)
        rows.append(x)
        cols.append(x)
        diag = self.bits @ (-0.5j * np.diag(couplings.Gamma))
        vals.append(diag)
        return csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.dim, self.dim))

    def coherence_matrix(self, rho: np.ndarray) -> np.ndarray:
        c = np.empty((self.n, self.n), dtype=complex)
        diag = np.real(np.diagonal(rho))
        pops = self.bits.T @ diag
        for i in range(self.n):
            c[i, i] = pops[i]
            for j in range(self.n):
                if i != j:
                    c[i, j] = rho[self.coh_rows[i, j], self.coh_cols[i, j]].sum()
        return c

    def pair_population_matrix(self, rho: np.ndarray) -> np.ndarray:
        diag = np.real(np.diagonal(rho))
        return (self.bits * diag[:, None]).T @ self.bits


def _recycle_add(out_t: np.ndarray, rho_t: np.ndarray, gamma: np.ndarray, n: int):
    """out += sum_ij Gamma_ij s_j rho s_i^dag via strided tensor views."""
    full = [slice(None)] * (2 * n)
    for i in range(n):
        for j in range(n):
            if gamma[i, j] == 0.0:
                continue
            src = list(full)
            dst = list(full)
            src[n - 1 - j], src[2 * n - 1 - i] = 1, 1
            dst[n - 1 - j], dst[2 * n - 1 - i] = 0, 0
            out_t[tuple(dst)] += gamma[i, j] * rho_t[tuple(src)]


def lindblad_rhs(rho: np.ndarray, couplings: CouplingMatrices) -> np.ndarray:
    """drho/dt for one density matrix (reference entry point; see module doc)."""
    n = couplings.n_atoms
    ops = _Operators(n)
    if rho.shape != (ops.dim, ops.dim):
        raise ValueError(f"density matrix must be {ops.dim}x{ops.dim} for {n} atoms")
    a = ops.effective_hamiltonian(couplings)
    p = a @ rho
    out = -1j * (p - p.conj().T)
    tshape = (2,) * (2 * n)
    _recycle_add(out.reshape(tshape), rho.reshape(tshape), couplings.Gamma, n)
    return out


def initial_density_matrix(init: InitialStateSpec, array: AtomArray) -> np.ndarray:
    n = array.n_atoms
    if init.coherent:
        theta = init.rotation_angle
        pos = array.atom_positions
        if init.phase_gradient is None:
            phases = np.full(n, init.phase_offset)
        else:
            k = 2 * np.pi * np.asarray(init.phase_gradient, dtype=float)
            phases = pos @ k + init.phase_offset
        amps = [np.array([np.cos(theta / 2),
                          np.exp(1j * phi) * np.sin(theta / 2)]) for phi in phases]
        psi = reduce(np.kron, reversed(amps))  # atom 0 least significant
        return np.outer(psi, psi.conj())
    p = init.excitation_probability
    weights = reduce(np.kron, [np.array([1 - p, p])] * n) if n > 1 else np.array([1 - p, p])
    return np.diag(weights.astype(complex))


def validate_density_matrix(rho: np.ndarray, check_positivity: bool = True) -> None:
    """Raise if rho is not Hermitian / unit trace / (optionally) positive."""
    if np.abs(rho - rho.conj().T).max() > 1e-10:
        raise ValueError("density matrix not Hermitian within 1e-10")
    if abs(np.trace(rho).real - 1.0) > 1e-9 or abs(np.trace(rho).imag) > 1e-9:
        raise ValueError("density matrix trace differs from 1 beyond 1e-9")
    if check_positivity and np.linalg.eigvalsh(rho).min() < -1e-8:
        raise ValueError("density matrix has eigenvalue below -1e-8")


def observables_exact(rho: np.ndarray, couplings: CouplingMatrices) -> dict:
    """Standard observable set from one density matrix."""
    n = couplings.n_atoms
    ops = _Operators(n)
    coh = ops.coherence_matrix(rho)
    nn = ops.pair_population_matrix(rho)
    pops = np.real(np.diagonal(coh)).copy()
    ne = pops.sum()
    off = coh.real.sum() - np.trace(coh.real)
    return {
        "populations": pops,
        "coherences": coh,
        "pair_populations": nn,
        "n_excited": ne,
        "emission_rate": float(np.sum(couplings.Gamma * coh.real)),
        "s_z": ne - n / 2,
        "m_perp_sq": n / 2 + off,
        "s_z_sq": nn.sum() - n * ne + n**2 / 4,
    }


def evolve_exact(init: InitialStateSpec, array: AtomArray,
                 couplings: CouplingMatrices, times, *, rtol: float = 1e-8,
                 atol: float = 1e-10, snapshot_times=None,
                 max_atoms: int = DEFAULT_ATOM_CAP) -> ExactTrajectory:
    """Integrate the master equation, streaming observables at `times`.

    Snapshots of the full density matrix are kept only at `snapshot_times`
    (each must coincide with a grid point); everything else is reduced on the
    fly, so memory stays at O(4^N) regardless of the grid length.
    """
    n = array.n_atoms
    if couplings.n_atoms != n:
        raise ValueError("array and couplings disagree on atom count")
    if n > max_atoms:
        raise ValueError(f"{n} atoms exceeds the exact-solver cap of {max_atoms}")
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 1 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a strictly increasing 1-d grid")
    snap_req = [] if snapshot_times is None else sorted(float(t) for t in snapshot_times)
    grid = set(np.round(times, 12).tolist())
    for t in snap_req:
        if round(t, 12) not in grid:
            raise ValueError(f"snapshot time {t} is not on the time grid")

    ops = _Operators(n)
    dim = ops.dim
    a = ops.effective_hamiltonian(couplings)
    gamma = couplings.Gamma
    tshape = (2,) * (2 * n)

    def fun(_t, y):
        rho = y.view(complex).reshape(dim, dim)
        p = a @ rho
        out = -1j * (p - p.conj().T)
        _recycle_add(out.reshape(tshape), rho.reshape(tshape), gamma, n)
        return out.ravel().view(np.float64)

    nt = len(times)
    populations = np.empty((nt, n))
    coherences = np.empty((nt, n, n), dtype=complex)
    pair_pops = np.empty((nt, n, n))
    rate = np.empty(nt)
    snapshots: dict = {}

    def record(k: int, rho: np.ndarray):
        coh = ops.coherence_matrix(rho)
        coherences[k] = coh
        populations[k] = np.real(np.diagonal(coh))
        pair_pops[k] = ops.pair_population_matrix(rho)
        rate[k] = np.sum(gamma * coh.real)
        t = float(times[k])
        if any(abs(t - s) <= 1e-12 for s in snap_req):
            snapshots[t] = rho.copy()

    rho0 = initial_density_matrix(init, array)
    record(0, rho0)

    if nt > 1:
        y0 = np.ascontiguousarray(rho0, dtype=complex).ravel().view(np.float64)
        solver = DOP853(fun, times[0], y0, t_bound=times[-1], rtol=rtol, atol=atol)
        idx = 1
        while idx < nt:
            solver.step()
            if solver.status == "failed":
                raise IntegrationFailureError(
                    f"integrator failed (step-size collapse) at t = {solver.t:.6g}",
                    solver.t)
            interp = solver.dense_output()
            t_reach = solver.t + 1e-12 * max(1.0, abs(solver.t))
            while idx < nt and times[idx] <= t_reach:
                y = interp(min(times[idx], solver.t))
                record(idx, np.ascontiguousarray(y).view(complex).reshape(dim, dim))
                idx += 1
            if solver.status == "finished" and idx < nt:
                raise IntegrationFailureError(
                    f"integration ended at t = {solver.t:.6g} before the grid end",
                    solver.t)

    return ExactTrajectory(times=times, populations=populations,
                           coherences=coherences, pair_populations=pair_pops,
                           emission_rate=rate, snapshots=snapshots, n_atoms=n)


def shot_sample(rho: np.ndarray, shots: int, seed: int) -> np.ndarray:
    """Projective occupancy measurements: (shots, N) 0/1 array, atom 0 first.

    Samples the diagonal of rho in the occupation basis, emulating
    site-resolved imaging of the excited-state population.
    """
    dim = rho.shape[0]
    n = dim.bit_length() - 1
    probs = np.clip(np.real(np.diagonal(rho)), 0.0, None)
    probs = probs / probs.sum()
    rng = rng_for(seed, STREAM_SHOTS)
    draws = rng.choice(dim, size=int(shots), p=probs)
    return ((draws[:, None] >> np.arange(n)[None, :]) & 1).astype(np.uint8)


def write_observables_csv(path, traj: ExactTrajectory,
                          include_pair_populations: bool = False) -> None:
    """Observable stream as CSV (repr-formatted floats, byte-reproducible)."""
    cols = traj.observable_columns(include_pair_populations)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols.keys())
        for k in range(len(traj.times)):
            writer.writerow(_fmt(cols[name][k]) for name in cols)


def read_observables_csv(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows)
    return {name: data[:, k] for k, name in enumerate(header)}
