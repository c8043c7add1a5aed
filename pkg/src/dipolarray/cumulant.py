"""Cumulant-expansion dynamics for large arrays.

Closes the Heisenberg hierarchy generated by the photon-mediated Lindblad
equation at order alpha: joint cumulants of more than alpha atoms are set to
zero, and same-atom operator products are reduced to single factors before
anything is factorized, so only distinct-atom products are ever closed.

Tracked correlators (g = J + i Gamma/2, zero diagonal):

    incoherent sector: <n_i>, <s_i^dag s_j>, <n_i n_j> and, at alpha=3,
    <n_x s_i^dag s_j> and <n_x n_y n_z>.
    coherent sector (alpha <= 2) adds <s_i>, <n_i s_j>, <s_i s_j>.

Every equation implemented here is checked term by term against the symbolic
generator in `moment_algebra`, which is in turn validated against the exact
density-matrix solver; see the test suite.  Storage keeps only independent
entries (Hermitian i<j pairs, x<y<z triples), so symmetry is exact by
construction rather than numerically maintained.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from itertools import combinations

import numpy as np
from scipy.integrate import DOP853

from .couplings import CouplingMatrices, MotionSpec, coupling_matrices
from .exact import InitialStateSpec, IntegrationFailureError
from .geometry import (
    AtomArray,
    DisorderSpec,
    DriveGeometry,
    EmptyRealizationError,
    LatticeSpec,
    build_array,
)
from .seeding import STREAM_ENSEMBLE, STREAM_MOTION, derive_seed
from .tableio import _fmt

logger = logging.getLogger(__name__)

POPULATION_SOFT_TOL = 1e-6   # outside [0,1] by less than this: clamp and log
POPULATION_HARD_TOL = 1e-3   # outside [0,1] by more than this: abort
CORRELATOR_LIMIT = 10.0      # any tracked |correlator| above this: abort
RATE_FLOOR_PER_ATOM = -1e-6  # tolerated fp negativity of the emission rate


class ClosureBlowupError(RuntimeError):
    """Unphysical state produced by the closure, with the diagnostic time."""

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class ClosureOrder:
    """Truncation order and whether single-operator averages are tracked."""

    alpha: int = 2
    coherent_sector: bool = False

    def __post_init__(self):
        if self.alpha not in (1, 2, 3):
            raise ValueError("alpha must be 1, 2, or 3")
        if self.alpha == 3 and self.coherent_sector:
            raise ValueError("alpha=3 is implemented for the incoherent sector only")


@dataclass
class CumulantState:
    """Tracked correlators as full tensors with aliased slots kept consistent.

    coherences has the populations on its diagonal; triple tensors carry the
    two-atom values on coincident slots (e.g. triple_coherences[x, x, j] =
    coherences[x, j]).  Only the independent entries feed the integrator, so
    consistency of the aliases is structural.
    """

    order: ClosureOrder
    populations: np.ndarray                       # (N,) real
    coherences: np.ndarray | None = None          # (N, N) complex Hermitian
    pair_populations: np.ndarray | None = None    # (N, N) real symmetric
    amplitudes: np.ndarray | None = None          # (N,) complex <s_i>
    pop_amplitudes: np.ndarray | None = None      # (N, N) complex <n_i s_j>
    amp_pairs: np.ndarray | None = None           # (N, N) complex <s_i s_j>
    triple_coherences: np.ndarray | None = None   # (N, N, N) <n_x s_i^dag s_j>
    triple_populations: np.ndarray | None = None  # (N, N, N) <n_x n_y n_z>

    @property
    def n_atoms(self) -> int:
        return len(self.populations)

    def to_vector(self) -> np.ndarray:
        return _layout(self.n_atoms, self.order).pack(self)


class _Layout:
    """Index bookkeeping between full tensors and the packed real state."""

    def __init__(self, n: int, order: ClosureOrder):
        self.n = n
        self.order = order
        self.iu = np.triu_indices(n, 1)
        off = ~np.eye(n, dtype=bool)
        self.offdiag = np.where(off)
        trips = np.array(list(combinations(range(n), 3)), dtype=int)
        self.xyz = (trips[:, 0], trips[:, 1], trips[:, 2]) if len(trips) else \
            (np.empty(0, int),) * 3
        # <n_x s_i^dag s_j> canonical slots: i < j, x distinct from both
        tx, ti, tj = [], [], []
        for i, j in zip(*self.iu):
            for x in range(n):
                if x != i and x != j:
                    tx.append(x)
                    ti.append(i)
                    tj.append(j)
        self.txyz = (np.array(tx, int), np.array(ti, int), np.array(tj, int))

        npair = n * (n - 1) // 2
        blocks = [("populations", n)]
        if order.alpha >= 2:
            blocks += [("coherences", 2 * npair), ("pair_populations", npair)]
        if order.alpha == 3:
            blocks += [("triple_coherences", 2 * len(self.txyz[0])),
                       ("triple_populations", len(self.xyz[0]))]
        if order.coherent_sector:
            blocks += [("amplitudes", 2 * n)]
            if order.alpha >= 2:
                blocks += [("pop_amplitudes", 2 * n * (n - 1)),
                           ("amp_pairs", 2 * npair)]
        self.slices = {}
        at = 0
        for name, size in blocks:
            self.slices[name] = slice(at, at + size)
            at += size
        self.size = at

    def _put_complex(self, y, name, values):
        sl = self.slices[name]
        half = (sl.stop - sl.start) // 2
        y[sl.start:sl.start + half] = values.real
        y[sl.start + half:sl.stop] = values.imag

    def _get_complex(self, y, name):
        sl = self.slices[name]
        half = (sl.stop - sl.start) // 2
        return y[sl.start:sl.start + half] + 1j * y[sl.start + half:sl.stop]

    def pack(self, state: CumulantState) -> np.ndarray:
        y = np.empty(self.size)
        y[self.slices["populations"]] = state.populations
        if self.order.alpha >= 2:
            self._put_complex(y, "coherences", state.coherences[self.iu])
            y[self.slices["pair_populations"]] = state.pair_populations[self.iu].real
        if self.order.alpha == 3:
            self._put_complex(y, "triple_coherences",
                              state.triple_coherences[self.txyz])
            y[self.slices["triple_populations"]] = \
                state.triple_populations[self.xyz].real
        if self.order.coherent_sector:
            self._put_complex(y, "amplitudes", state.amplitudes)
            if self.order.alpha >= 2:
                self._put_complex(y, "pop_amplitudes",
                                  state.pop_amplitudes[self.offdiag])
                self._put_complex(y, "amp_pairs", state.amp_pairs[self.iu])
        return y

    def unpack(self, y: np.ndarray) -> CumulantState:
        n = self.n
        pop = y[self.slices["populations"]].copy()
        state = CumulantState(order=self.order, populations=pop)
        if self.order.alpha >= 2:
            c = np.zeros((n, n), dtype=complex)
            c[self.iu] = self._get_complex(y, "coherences")
            c += c.conj().T
            c[np.diag_indices(n)] = pop
            nn = np.zeros((n, n))
            nn[self.iu] = y[self.slices["pair_populations"]]
            nn += nn.T
            nn[np.diag_indices(n)] = pop
            state.coherences, state.pair_populations = c, nn
        if self.order.alpha == 3:
            state.triple_coherences = self._fill_triple_coherences(
                self._get_complex(y, "triple_coherences"), state)
            state.triple_populations = self._fill_triple_populations(
                y[self.slices["triple_populations"]], state)
        if self.order.coherent_sector:
            state.amplitudes = self._get_complex(y, "amplitudes")
            if self.order.alpha >= 2:
                w = np.zeros((n, n), dtype=complex)
                w[self.offdiag] = self._get_complex(y, "pop_amplitudes")
                s = np.zeros((n, n), dtype=complex)
                s[self.iu] = self._get_complex(y, "amp_pairs")
                s += s.T
                state.pop_amplitudes, state.amp_pairs = w, s
        return state

    def _fill_triple_coherences(self, values, state):
        """Scatter canonical entries and alias every coincident slot."""
        n = self.n
        t = np.zeros((n, n, n), dtype=complex)
        tx, ti, tj = self.txyz
        t[tx, ti, tj] = values
        t[tx, tj, ti] = values.conj()
        return fill_triple_coherence_slots(t, state.coherences,
                                           state.pair_populations,
                                           state.populations)

    def _fill_triple_populations(self, values, state):
        n = self.n
        t = np.zeros((n, n, n))
        x, y_, z = self.xyz
        for perm in ((x, y_, z), (x, z, y_), (y_, x, z),
                     (y_, z, x), (z, x, y_), (z, y_, x)):
            t[perm] = values
        ar = np.arange(n)
        t[ar, ar, :] = state.pair_populations
        t[ar, :, ar] = state.pair_populations
        t[:, ar, ar] = state.pair_populations
        return t


def fill_triple_coherence_slots(t, coherences, pair_populations, populations):
    """Enforce the aliases of <n_x s_i^dag s_j> on coincident indices:
    (x,x,j) -> <s_x^dag s_j>, (x,i,x) -> 0, (x,p,p) -> <n_x n_p>."""
    n = len(populations)
    ar = np.arange(n)
    t[ar, ar, :] = coherences
    t[ar, :, ar] = 0.0
    t[:, ar, ar] = pair_populations
    return t


@lru_cache(maxsize=32)
def _layout_cached(n: int, alpha: int, coherent: bool) -> _Layout:
    return _Layout(n, ClosureOrder(alpha, coherent))


def _layout(n: int, order: ClosureOrder) -> _Layout:
    return _layout_cached(n, order.alpha, order.coherent_sector)


def initial_cumulant_state(init: InitialStateSpec, array: AtomArray,
                           order: ClosureOrder) -> CumulantState:
    """Product initial state: every joint cumulant starts at zero."""
    n = array.n_atoms
    if init.coherent and not order.coherent_sector:
        raise ValueError("coherent initial state requires coherent_sector=True")
    p = init.p_excited
    pop = np.full(n, p)
    if init.coherent:
        theta = init.rotation_angle
        phases = np.zeros(n)
        if init.phase_gradient is not None:
            phases = 2 * np.pi * array.atom_positions @ np.asarray(
                init.phase_gradient, dtype=float)
        b = np.cos(theta / 2) * np.sin(theta / 2) * np.exp(1j * (phases + init.phase_offset))
    else:
        b = np.zeros(n, dtype=complex)

    state = CumulantState(order=order, populations=pop)
    if order.alpha >= 2:
        c = np.outer(b.conj(), b)
        np.fill_diagonal(c, pop)
        nn = np.outer(pop, pop)
        np.fill_diagonal(nn, pop)
        state.coherences, state.pair_populations = c, nn
    if order.alpha == 3:
        t = pop[:, None, None] * state.coherences[None, :, :]
        state.triple_coherences = fill_triple_coherence_slots(
            t, state.coherences, state.pair_populations, pop)
        t3 = pop[:, None, None] * state.pair_populations[None, :, :]
        ar = np.arange(n)
        t3[ar, ar, :] = state.pair_populations
        t3[ar, :, ar] = state.pair_populations
        t3[:, ar, ar] = state.pair_populations
        state.triple_populations = t3
    if order.coherent_sector:
        state.amplitudes = b
        if order.alpha >= 2:
            w = np.outer(pop, b)
            np.fill_diagonal(w, 0)
            s = np.outer(b, b)
            np.fill_diagonal(s, 0)
            state.pop_amplitudes, state.amp_pairs = w, s
    return state


def _coupling_terms(couplings: CouplingMatrices):
    g = couplings.J + 0.5j * couplings.Gamma
    np.fill_diagonal(g, 0)
    return g, g.conj()


def _t_contractions_closed(n_pop, c, nn, b, w, g, gc):
    """The three <n_x s^dag s> contractions entering dC and dNN, with the
    triple closed at order 2 (coherent formula; pass zero b/w for incoherent):

        S1[i,j] = sum_a g[i,a]  (2 T[i,a,j] - C[a,j])
        S2[i,j] = sum_a gc[j,a] (2 T[j,i,a] - C[i,a])
        F1[i,j] = sum_a g[i,a]  T[j,a,i]

    Full sums over a, with the coincident-slot aliases (T[x,x,q] = C[x,q],
    T[x,p,p] = <n_x n_p>, T[x,p,x] = 0) restored analytically, so the result
    is identical to contracting the slot-filled closure tensor.
    """
    bc = b.conj()
    wc = w.conj()
    gC = g @ c
    dg = np.diagonal(gC)
    cgcT = c @ gc.T
    gbc = g @ bc
    gcb = gc @ b
    outer_nn = np.outer(n_pop, n_pop)
    # closure value of the pair slot T[i,j,j] (what the naive formula would
    # put where the tracked <n_i n_j> belongs)
    pair_cf = (outer_nn + wc * b[None, :] + w * bc[None, :]
               - 2 * n_pop[:, None] * (np.abs(b) ** 2)[None, :])

    s1 = (2 * (n_pop[:, None] * gC
               + np.outer((g * wc).sum(axis=1), b)
               + w * gbc[:, None]
               - 2 * n_pop[:, None] * gbc[:, None] * b[None, :]
               + g * (nn - pair_cf))
          - gC)
    s2 = (2 * (n_pop[None, :] * cgcT
               + wc.T * gcb[None, :]
               + np.outer(bc, (gc * w).sum(axis=1))
               - 2 * n_pop[None, :] * bc[:, None] * gcb[None, :]
               + gc.T * (nn - pair_cf.T))
          - cgcT)
    f1 = (np.outer(dg, n_pop)
          + b[:, None] * (g @ wc.T)
          + w.T * gbc[:, None]
          - 2 * np.outer(b * gbc, n_pop)
          + g * (c.T - n_pop[None, :] * c.T - w.T * bc[None, :]
                 + 2 * n_pop[None, :] * bc[None, :] * b[:, None]))
    return s1, s2, f1


def _t_contractions_tracked(t, c, g, gc):
    """Same contractions with the order-3 tracked (slot-filled) triple."""
    s1 = 2 * np.einsum("ia,iaj->ij", g, t) - g @ c
    s2 = 2 * np.einsum("ja,jia->ij", gc, t) - c @ gc.T
    f1 = np.einsum("ia,jai->ij", g, t)
    return s1, s2, f1


def _charge_zero_rhs(n_pop, c, nn, s1, s2, f1, g, couplings):
    """dn, dC, dNN given the triple contractions (off-diagonal slots valid)."""
    gamma0 = couplings.gamma0
    dn = 2 * (couplings.J * c.imag).sum(axis=1) - (couplings.Gamma * c.real).sum(axis=1)
    dc = -gamma0 * c - 1j * s1 + 1j * s2
    dnn = (-2 * gamma0 * nn - 2 * (f1.imag + f1.imag.T)
           + 2 * ((g * c).imag + (g * c.T).imag))
    return dn, dc, dnn


def _coherent_rhs(n_pop, c, nn, b, w, s, g, gc, gamma0):
    """db, dW, dS with three-atom moments closed at order 2."""
    bc = b.conj()
    gcb = gc @ b
    gbc = g @ bc
    rw = (gc * w).sum(axis=1)
    db = -0.5 * gamma0 * b + 1j * (2 * rw - gcb)

    gC = g @ c
    dg = np.diagonal(gC)
    wgcT = w @ gc.T
    sgcT = s @ gc.T
    gcS = gc @ s
    rgC = (gc * c).sum(axis=1)
    # X1[i,j] = sum_a g[i,a] <s_a^dag s_i s_j>, closed
    x1 = (np.outer(dg, b) + gC * b[:, None]
          + (s - 2 * np.outer(b, b)) * gbc[:, None])
    x1c = g * (c.T * b[None, :] + np.outer(b, n_pop)
               + s * bc[None, :] - 2 * np.outer(b, np.abs(b) ** 2))
    # X2[i,j] = sum_a gc[i,a] <s_i^dag s_a s_j>, closed
    x2 = (np.outer(rgC, b) + c * gcb[:, None]
          + bc[:, None] * gcS - 2 * np.outer(bc * gcb, b))
    x2c = gc * (2 * c * b[None, :] - 2 * np.outer(bc, b ** 2))
    # Y[i,j] = sum_a gc[j,a] (2 <n_i n_j s_a> - <n_i s_a>), closed
    y = (2 * (np.outer(n_pop, rw) + n_pop[None, :] * wgcT
              + (nn - 2 * np.outer(n_pop, n_pop)) * gcb[None, :])
         - wgcT)
    yc = gc.T * 2 * (n_pop[:, None] * w.T
                     + (nn - 2 * np.outer(n_pop, n_pop)) * b[:, None])
    dw = (-1.5 * gamma0 * w + 1j * g * w.T
          + 1j * (x1 - x1c) - 1j * (x2 - x2c) + 1j * (y - yc))

    # dS[i,j] = -gamma0 S + i (Fs[i,j] + Fs[j,i]) with
    # Fs[i,j] = sum_a gc[i,a] (2 <n_i s_j s_a> - <s_j s_a>), closed
    fs = (2 * (n_pop[:, None] * sgcT.T + gcb[:, None] * w
               + np.outer(rw, b) - 2 * np.outer(n_pop * gcb, b))
          - sgcT.T)
    fsc = 4 * gc * (w * b[None, :] - n_pop[:, None] * (b ** 2)[None, :])
    ds = -gamma0 * s + 1j * ((fs - fsc) + (fs - fsc).T)
    return db, dw, ds


def _order3_rhs(state: CumulantState, couplings: CouplingMatrices, layout: _Layout):
    """dT and dNNN on the canonical index arrays (incoherent sector)."""
    n_pop = state.populations
    c = state.coherences
    nn = state.pair_populations
    t = state.triple_coherences
    t3 = state.triple_populations
    gamma0 = couplings.gamma0
    g, gc = _coupling_terms(couplings)

    gC = g @ c
    dg = np.diagonal(gC)
    cgcT = c @ gc.T
    s2r = (gc * c).sum(axis=1)
    a1 = np.tensordot(g, t, axes=(1, 1)).transpose(1, 0, 2)   # sum_a g[i,a] T[x,a,j]
    a2 = np.einsum("ia,iaj->ij", g, t)                        # sum_a g[i,a] T[i,a,j]
    b1 = np.tensordot(t, gc, axes=(2, 1))                     # sum_a gc[j,a] T[x,i,a]
    b2 = np.einsum("ja,jia->ij", gc, t)                       # sum_a gc[j,a] T[j,i,a]
    d1 = np.einsum("ca,uac->uc", g, t)                        # sum_a g[c,a] T[u,a,c]

    tx, ti, tj = layout.txyz
    tg = t[tx, ti, tj]
    mxi = nn[tx, ti] - 2 * n_pop[tx] * n_pop[ti]
    mxj = nn[tx, tj] - 2 * n_pop[tx] * n_pop[tj]

    term2 = 1j * (g[tx, tj] * t[tj, ti, tx] - gc[tx, ti] * t[ti, tx, tj])
    term3 = (2j * (gc - g)[ti, tj] * t3[tx, ti, tj]
             + 1j * (g[ti, tj] * nn[tx, tj] - gc[ti, tj] * nn[tx, ti]))
    e1 = 1j * (dg[tx] * c[ti, tj] + gC[tx, tj] * c[ti, tx])
    e1c = 1j * (2 * g[tx, ti] * c[ti, tx] * c[ti, tj]
                + g[tx, tj] * (c[tj, tx] * c[ti, tj] + n_pop[tj] * c[ti, tx]))
    e2 = -1j * (s2r[tx] * c[ti, tj] + c[tx, tj] * cgcT[ti, tx])
    e2c = -1j * (gc[tx, ti] * (c[tx, ti] * c[ti, tj] + n_pop[ti] * c[tx, tj])
                 + 2 * gc[tx, tj] * c[tx, tj] * c[ti, tj])
    a1g = a1[tx, ti, tj]
    e3 = -1j * (2 * (n_pop[ti] * a1g + n_pop[tx] * a2[ti, tj]
                     + mxi * gC[ti, tj]) - a1g)
    e3c = -1j * (g[ti, tx] * (2 * (n_pop[ti] * c[tx, tj] + n_pop[tx] * t[ti, tx, tj]
                                   + mxi * c[tx, tj]) - c[tx, tj])
                 + g[ti, tj] * (2 * (n_pop[ti] * nn[tx, tj] + n_pop[tx] * nn[ti, tj]
                                     + mxi * n_pop[tj]) - nn[tx, tj]))
    b1g = b1[tx, ti, tj]
    e4 = 1j * (2 * (n_pop[tj] * b1g + n_pop[tx] * b2[ti, tj]
                    + mxj * cgcT[ti, tj]) - b1g)
    e4c = 1j * (gc[tj, tx] * 2 * (n_pop[tx] * t[tj, ti, tx] + mxj * c[ti, tx])
                + gc[tj, ti] * (2 * (n_pop[tj] * nn[tx, ti] + n_pop[tx] * nn[tj, ti]
                                     + mxj * n_pop[ti]) - nn[tx, ti]))
    dt = (-2 * gamma0 * tg + term2 + term3
          + (e1 - e1c) + (e2 - e2c) + (e3 - e3c) + (e4 - e4c))

    x, y_, z = layout.xyz
    acc = np.zeros(len(x))
    for cx, u, v in ((x, y_, z), (y_, x, z), (z, x, y_)):
        muv = nn[u, v] - 2 * n_pop[u] * n_pop[v]
        full = n_pop[v] * d1[u, cx] + n_pop[u] * d1[v, cx] + muv * dg[cx]
        corr_u = g[cx, u] * (n_pop[v] * c[u, cx] + n_pop[u] * t[v, u, cx]
                             + muv * c[u, cx])
        corr_v = g[cx, v] * (n_pop[v] * t[u, v, cx] + n_pop[u] * c[v, cx]
                             + muv * c[v, cx])
        acc += (full - corr_u - corr_v).imag
    dt3 = -3 * gamma0 * t3[x, y_, z] - 2 * acc
    return dt, dt3


def cumulant_rhs(state: CumulantState, couplings: CouplingMatrices,
                 order: ClosureOrder | None = None) -> CumulantState:
    """Time derivative of every tracked correlator under the chosen closure."""
    order = state.order if order is None else order
    n = state.n_atoms
    if couplings.n_atoms != n:
        raise ValueError("state and couplings disagree on atom count")
    layout = _layout(n, order)
    dy = _rhs_vector(layout.pack(state), layout, couplings)
    return layout.unpack(dy)


def _rhs_vector(y: np.ndarray, layout: _Layout, couplings: CouplingMatrices) -> np.ndarray:
    state = layout.unpack(y)
    order = layout.order
    n = layout.n
    n_pop = state.populations
    gamma0 = couplings.gamma0
    g, gc = _coupling_terms(couplings)
    zeros_v = np.zeros(n, dtype=complex)
    zeros_m = np.zeros((n, n), dtype=complex)

    b = state.amplitudes if order.coherent_sector else zeros_v
    if order.alpha == 1:
        # closures of the pair level itself
        c = np.outer(b.conj(), b)
        np.fill_diagonal(c, n_pop)
        dn = (2 * (couplings.J * c.imag).sum(axis=1)
              - (couplings.Gamma * c.real).sum(axis=1))
        out = CumulantState(order=order, populations=dn)
        if order.coherent_sector:
            w_eff = np.outer(n_pop, b)
            out.amplitudes = (-0.5 * gamma0 * b
                              + 1j * (2 * (gc * w_eff).sum(axis=1) - gc @ b))
        return layout.pack(out)

    c = state.coherences
    nn = state.pair_populations
    if order.alpha == 2:
        w = state.pop_amplitudes if order.coherent_sector else zeros_m
        s1, s2, f1 = _t_contractions_closed(n_pop, c, nn, b, w, g, gc)
    else:
        s1, s2, f1 = _t_contractions_tracked(state.triple_coherences, c, g, gc)
    dn, dc, dnn = _charge_zero_rhs(n_pop, c, nn, s1, s2, f1, g, couplings)
    out = CumulantState(order=order, populations=dn, coherences=dc,
                        pair_populations=dnn)
    if order.alpha == 3:
        dt, dt3 = _order3_rhs(state, couplings, layout)
        out.triple_coherences = np.zeros((n, n, n), dtype=complex)
        out.triple_coherences[layout.txyz] = dt
        out.triple_populations = np.zeros((n, n, n))
        out.triple_populations[layout.xyz] = dt3
    if order.coherent_sector:
        db, dw, ds = _coherent_rhs(n_pop, c, nn, b, state.pop_amplitudes,
                                   state.amp_pairs, g, gc, gamma0)
        out.amplitudes, out.pop_amplitudes, out.amp_pairs = db, dw, ds
    return layout.pack(out)


def make_time_grid(dense_until: float = 5.0, end: float = 20.0,
                   dense_step: float = 0.05, log_points: int = 40) -> np.ndarray:
    """Uniform grid on [0, dense_until] plus a logarithmic tail to `end`."""
    if dense_until <= 0 or dense_step <= 0:
        raise ValueError("dense_until and dense_step must be positive")
    dense = np.arange(0.0, dense_until + dense_step / 2, dense_step)
    if end <= dense_until:
        return dense
    tail = np.geomspace(dense_until, end, log_points + 1)[1:]
    return np.concatenate([dense, tail])


@dataclass
class ObservableTrace:
    """Reduced observable stream from one run or an ensemble average."""

    times: np.ndarray
    n_excited: np.ndarray
    emission_rate: np.ndarray
    s_z: np.ndarray
    m_perp_sq: np.ndarray
    n_atoms: float
    order: ClosureOrder
    populations: np.ndarray | None = None   # (T, N), single runs only
    snapshots: dict = field(default_factory=dict)
    n_realizations: int = 1
    stderr: dict | None = None               # per-time standard errors
    failures: tuple = ()
    clamped_points: int = 0

    @property
    def gamma_normalized(self) -> np.ndarray:
        """Emission rate per remaining excitation, gamma(t) in units of gamma0."""
        out = np.full_like(self.emission_rate, np.nan)
        ok = self.n_excited > 1e-12
        out[ok] = self.emission_rate[ok] / self.n_excited[ok]
        return out


def _checked_state(y: np.ndarray, layout: _Layout, t: float):
    """Unpack with the blow-up guards; returns (state, population excess).

    Raises ClosureBlowupError for non-finite values, correlator magnitudes
    above CORRELATOR_LIMIT, or populations outside [0, 1] by more than
    POPULATION_HARD_TOL.  Smaller excursions are the caller's to clamp.
    """
    if not np.all(np.isfinite(y)):
        raise ClosureBlowupError(f"non-finite correlator at t = {t:.6g}", t)
    worst = np.abs(y).max()
    if worst > CORRELATOR_LIMIT:
        raise ClosureBlowupError(
            f"correlator magnitude {worst:.3g} exceeds "
            f"{CORRELATOR_LIMIT} at t = {t:.6g}", t)
    state = layout.unpack(y)
    pop = state.populations
    excess = max(float(-pop.min()), float(pop.max() - 1.0))
    if excess > POPULATION_HARD_TOL:
        raise ClosureBlowupError(
            f"population outside [0, 1] by {excess:.3g} at t = {t:.6g}", t)
    return state, excess


def evolve_cumulant(init: InitialStateSpec, array: AtomArray,
                    couplings: CouplingMatrices, order: ClosureOrder, times,
                    *, rtol: float = 1e-7, atol: float = 1e-9,
                    snapshot_times=None) -> ObservableTrace:
    """Integrate the closed moment equations, streaming observables at `times`.

    Aborts with ClosureBlowupError when the closure leaves the physical
    region: any tracked |correlator| above CORRELATOR_LIMIT, a population
    outside [0, 1] by more than POPULATION_HARD_TOL, a negative emission rate
    beyond float tolerance for incoherent initial states, or non-finite
    values.  Populations outside [0, 1] by less than POPULATION_SOFT_TOL are
    clamped in the recorded output and counted (never fed back into the
    integrator state).
    """
    n = array.n_atoms
    if couplings.n_atoms != n:
        raise ValueError("array and couplings disagree on atom count")
    if order.alpha == 3 and init.coherent:
        raise ValueError("alpha=3 supports incoherent initial states only")
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 1 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a strictly increasing 1-d grid")
    snap_req = [] if snapshot_times is None else sorted(float(t) for t in snapshot_times)
    grid = set(np.round(times, 12).tolist())
    for t in snap_req:
        if round(t, 12) not in grid:
            raise ValueError(f"snapshot time {t} is not on the time grid")

    layout = _layout(n, order)
    state0 = initial_cumulant_state(init, array, order)
    y0 = layout.pack(state0)
    gamma = couplings.Gamma

    nt = len(times)
    populations = np.empty((nt, n))
    n_excited = np.empty(nt)
    rate = np.empty(nt)
    s_z = np.empty(nt)
    m_perp = np.empty(nt)
    snapshots: dict = {}
    clamped = 0
    rate_floor = RATE_FLOOR_PER_ATOM * n * couplings.gamma0

    def record(k: int, y: np.ndarray):
        nonlocal clamped
        t = float(times[k])
        state, excess = _checked_state(y, layout, t)
        if excess > POPULATION_SOFT_TOL:
            clamped += 1
            logger.warning("clamping population excursion %.3g at t = %.6g",
                           excess, t)
        pop = np.clip(state.populations, 0.0, 1.0)
        if state.order.alpha == 1:
            b = state.amplitudes if order.coherent_sector else \
                np.zeros(n, dtype=complex)
            c = np.outer(b.conj(), b)
            np.fill_diagonal(c, pop)
        else:
            c = state.coherences
        populations[k] = pop
        n_excited[k] = pop.sum()
        rate[k] = float((gamma * c.real).sum())
        if not init.coherent and rate[k] < rate_floor:
            raise ClosureBlowupError(
                f"negative emission rate {rate[k]:.3g} at t = {t:.6g} "
                "(closure breakdown)", t)
        s_z[k] = n_excited[k] - n / 2
        m_perp[k] = n / 2 + c.real.sum() - np.trace(c.real)
        if any(abs(t - s) <= 1e-12 for s in snap_req):
            snapshots[t] = {
                "populations": pop.copy(),
                "coherences": c.copy(),
                "pair_populations": None if state.pair_populations is None
                else state.pair_populations.copy(),
            }

    record(0, y0)
    if nt > 1:
        solver = DOP853(lambda _t, y: _rhs_vector(y, layout, couplings),
                        times[0], y0, t_bound=times[-1], rtol=rtol, atol=atol)
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
                record(idx, np.ascontiguousarray(interp(min(times[idx], solver.t))))
                idx += 1
            if solver.status == "finished" and idx < nt:
                raise IntegrationFailureError(
                    f"integration ended at t = {solver.t:.6g} before the grid end",
                    solver.t)

    return ObservableTrace(times=times, n_excited=n_excited, emission_rate=rate,
                           s_z=s_z, m_perp_sq=m_perp, n_atoms=float(n),
                           order=order, populations=populations,
                           snapshots=snapshots, clamped_points=clamped)


@dataclass(frozen=True)
class EnsembleConfig:
    """Everything needed to draw and evolve one loading realization."""

    lattice: LatticeSpec
    init: InitialStateSpec
    order: ClosureOrder
    times: tuple
    disorder: DisorderSpec | None = None
    drive: DriveGeometry | None = None
    motion: MotionSpec | None = None
    gamma0: float = 1.0
    rtol: float = 1e-7
    atol: float = 1e-9


def ensemble_run(config: EnsembleConfig, realizations: int, master_seed: int,
                 collect=None) -> ObservableTrace:
    """Average evolve_cumulant over loading/disorder/motion realizations.

    Realization r uses the seed derived from (master_seed, ensemble stream, r)
    for occupancy and disorder, with the motional sampler reseeded per
    realization; results are therefore deterministic in master_seed and
    independent of any execution order.  Failed realizations (closure blow-up,
    integrator failure, empty loading draws) are recorded in `failures` and
    excluded from the averages; having no successful realization raises.

    `collect(r, array, trace)` is an optional per-realization hook; the
    collected values land in the returned trace's snapshots dict under the
    key "collected" (used for loading-averaged correlation maps).
    """
    if realizations < 1:
        raise ValueError("realizations must be >= 1")
    times = np.asarray(config.times, dtype=float)
    streams = {"n_excited": [], "emission_rate": [], "s_z": [], "m_perp_sq": []}
    failures = []
    collected = []
    atom_counts = []
    clamped = 0
    for r in range(realizations):
        seed_r = derive_seed(master_seed, STREAM_ENSEMBLE, r)
        try:
            array = build_array(config.lattice, config.disorder, config.drive,
                                seed=seed_r)
            motion = None
            if config.motion is not None:
                motion = replace(config.motion,
                                 seed=derive_seed(seed_r, STREAM_MOTION))
            cm = coupling_matrices(array, motion=motion, gamma0=config.gamma0)
            trace = evolve_cumulant(config.init, array, cm, config.order,
                                    times, rtol=config.rtol, atol=config.atol)
        except (ClosureBlowupError, IntegrationFailureError,
                EmptyRealizationError) as err:
            failures.append((r, f"{type(err).__name__}: {err}"))
            continue
        for key in streams:
            streams[key].append(getattr(trace, key))
        atom_counts.append(array.n_atoms)
        clamped += trace.clamped_points
        if collect is not None:
            collected.append(collect(r, array, trace))
    if not atom_counts:
        raise RuntimeError(
            f"all {realizations} realizations failed; first: {failures[0][1]}")

    def reduce_mean(values):
        stack = np.stack(values)
        mean = stack.mean(axis=0)
        if len(values) > 1:
            err = stack.std(axis=0, ddof=1) / np.sqrt(len(values))
        else:
            err = np.zeros_like(mean)
        return mean, err

    means, errs = {}, {}
    for key, vals in streams.items():
        means[key], errs[key] = reduce_mean(vals)
    snapshots = {"collected": collected} if collect is not None else {}
    return ObservableTrace(times=times, n_excited=means["n_excited"],
                           emission_rate=means["emission_rate"],
                           s_z=means["s_z"], m_perp_sq=means["m_perp_sq"],
                           n_atoms=float(np.mean(atom_counts)),
                           order=config.order, populations=None,
                           snapshots=snapshots,
                           n_realizations=len(atom_counts), stderr=errs,
                           failures=tuple(failures), clamped_points=clamped)


def write_trace_csv(path, trace: ObservableTrace) -> None:
    """Observable stream as CSV (repr-formatted floats, byte-reproducible)."""
    cols = {"t": trace.times, "n_excited": trace.n_excited,
            "emission_rate": trace.emission_rate,
            "gamma_normalized": trace.gamma_normalized,
            "s_z": trace.s_z, "m_perp_sq": trace.m_perp_sq}
    if trace.stderr is not None:
        for key in ("n_excited", "emission_rate", "s_z", "m_perp_sq"):
            cols[f"stderr_{key}"] = trace.stderr[key]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols.keys())
        for k in range(len(trace.times)):
            writer.writerow([_fmt(col[k]) for col in cols.values()])


def read_trace_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    return {name: np.array([float(row[k]) for row in data])
            for k, name in enumerate(header)}
