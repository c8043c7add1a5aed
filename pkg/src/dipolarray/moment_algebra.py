"""Symbolic Heisenberg moment algebra for two-level emitters.

Reference machinery behind the production moment solver: generates the exact
equation of motion for any product of single-atom operators under the
photon-mediated Lindblad generator, and closes out-of-hierarchy moments by
setting joint cumulants beyond a chosen order to zero.  Everything here is
deliberately direct and unvectorized; the fast solver is validated against it
term by term, and this module is itself validated against the full
density-matrix integrator.

Operators are tuples of (atom, kind) with kind in {"sp", "sm", "n"} for the
raising, lowering, and excited-state projector of one atom.  Tuples are kept
sorted by atom with the per-atom factor order preserved (operators on
different atoms commute; same-atom order matters and is reduced by the
single-atom product table before anything is factorized).
"""

from __future__ import annotations

from collections import defaultdict
from functools import reduce

import numpy as np

Ops = tuple  # tuple[(atom, kind), ...]
Terms = list  # list[(complex, Ops)]

# single-atom products: (left, right) -> [(coeff, kind-or-None)], None = identity
_TABLE = {
    ("sp", "sp"): [],
    ("sp", "sm"): [(1.0, "n")],
    ("sp", "n"): [],
    ("sm", "sp"): [(1.0, None), (-1.0, "n")],
    ("sm", "sm"): [],
    ("sm", "n"): [(1.0, "sm")],
    ("n", "sp"): [(1.0, "sp")],
    ("n", "sm"): [],
    ("n", "n"): [(1.0, "n")],
}

_MATRICES = {
    None: np.eye(2, dtype=complex),
    "sp": np.array([[0, 0], [1, 0]], dtype=complex),   # |e><g|
    "sm": np.array([[0, 1], [0, 0]], dtype=complex),   # |g><e|
    "n": np.array([[0, 0], [0, 1]], dtype=complex),
}


def _reduce_atom(kinds):
    """Left-to-right product of one atom's factors -> [(coeff, kind-or-None)]."""
    out = [(1.0 + 0j, None)]
    for k in kinds:
        new = []
        for c, cur in out:
            if cur is None:
                new.append((c, k))
            else:
                for c2, k2 in _TABLE[cur, k]:
                    new.append((c * c2, k2))
        out = new
    return out


def multiply(a_ops: Ops, b_ops: Ops) -> Terms:
    """Canonical terms of the operator product (prod a_ops)(prod b_ops)."""
    per_atom: dict[int, list] = defaultdict(list)
    for atom, kind in a_ops:
        per_atom[atom].append(kind)
    for atom, kind in b_ops:
        per_atom[atom].append(kind)
    result = [(1.0 + 0j, [])]
    for atom in sorted(per_atom):
        reduced = _reduce_atom(per_atom[atom])
        result = [(c * c2, ops + ([(atom, k2)] if k2 else []))
                  for c, ops in result for c2, k2 in reduced]
        if not result:
            return []
    return [(c, tuple(ops)) for c, ops in result if c != 0]


def _mul_terms(terms_a: Terms, terms_b: Terms) -> Terms:
    out: dict[Ops, complex] = defaultdict(complex)
    for ca, oa in terms_a:
        for cb, ob in terms_b:
            for c, o in multiply(oa, ob):
                out[o] += ca * cb * c
    return [(c, o) for o, c in out.items() if c != 0]


def adjoint_rhs(ops: Ops, j_mat: np.ndarray, gamma_mat: np.ndarray) -> Terms:
    """Exact d<ops>/dt as a combination of canonical operator products.

    Adjoint Lindblad form: i<[H, O]> plus, for every ordered pair (a, b),
    (Gamma_ab/2) <2 s_a^dag O s_b - s_a^dag s_b O - O s_a^dag s_b>.
    """
    n = len(j_mat)
    o_tl = [(1.0 + 0j, ops)]
    acc: dict[Ops, complex] = defaultdict(complex)

    def add(coeff, terms):
        for c, o in terms:
            acc[o] += coeff * c

    for a in range(n):
        sp = [(1.0 + 0j, ((a, "sp"),))]
        for b in range(n):
            sm = [(1.0 + 0j, ((b, "sm"),))]
            ab = _mul_terms(sp, sm)
            if a != b and j_mat[a, b] != 0:
                add(1j * j_mat[a, b], _mul_terms(ab, o_tl))
                add(-1j * j_mat[a, b], _mul_terms(o_tl, ab))
            g = gamma_mat[a, b]
            if g != 0:
                add(g, _mul_terms(sp, _mul_terms(o_tl, sm)))
                add(-0.5 * g, _mul_terms(ab, o_tl))
                add(-0.5 * g, _mul_terms(o_tl, ab))
    return [(c, o) for o, c in acc.items() if c != 0]


def dense_operator(ops: Ops, n_atoms: int) -> np.ndarray:
    """Kronecker assembly with atom 0 in the least significant slot."""
    per_atom = {atom: kind for atom, kind in ops}
    if len(per_atom) != len(ops):
        raise ValueError("dense_operator expects at most one factor per atom")
    mats = [_MATRICES[per_atom.get(atom)] for atom in range(n_atoms)]
    return reduce(lambda acc, m: np.kron(m, acc), mats)


def moments_from_density(rho: np.ndarray):
    """Moment lookup <prod ops> evaluated by tracing against rho (memoized)."""
    n_atoms = rho.shape[0].bit_length() - 1
    cache: dict[Ops, complex] = {}

    def moments(ops: Ops) -> complex:
        if not ops:
            return 1.0 + 0j
        if ops not in cache:
            cache[ops] = complex(np.trace(dense_operator(ops, n_atoms) @ rho))
        return cache[ops]

    return moments


def set_partitions(items: list):
    """All partitions of a list into nonempty blocks."""
    if len(items) == 1:
        yield [items]
        return
    head, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for k in range(len(part)):
            yield part[:k] + [[head] + part[k]] + part[k + 1:]
        yield [[head]] + part


def closure_expectation(ops: Ops, moments, alpha: int) -> complex:
    """<ops> with joint cumulants of more than alpha atoms set to zero.

    Operators acting on at most alpha distinct atoms are looked up directly;
    larger products are replaced by the sum over proper set partitions of the
    atoms, with each block's cumulant computed recursively from moments.
    """
    atoms = [atom for atom, _ in ops]
    if len(set(atoms)) != len(atoms):
        raise ValueError("closure expects canonical ops (one factor per atom)")
    if len(atoms) <= alpha:
        return moments(ops)
    by_atom = dict(ops)
    kappa_cache: dict[frozenset, complex] = {}

    def sub_ops(atom_set) -> Ops:
        return tuple((a, by_atom[a]) for a in sorted(atom_set))

    def kappa(atom_set: frozenset) -> complex:
        if atom_set not in kappa_cache:
            val = moments(sub_ops(atom_set))
            if len(atom_set) > 1:
                for part in set_partitions(sorted(atom_set)):
                    if len(part) >= 2:
                        val -= reduce(lambda p, blk: p * kappa(frozenset(blk)),
                                      part, 1.0 + 0j)
            kappa_cache[atom_set] = val
        return kappa_cache[atom_set]

    total = 0.0 + 0j
    for part in set_partitions(atoms):
        if len(part) >= 2:
            total += reduce(lambda p, blk: p * kappa(frozenset(blk)), part, 1.0 + 0j)
    return total


def closed_rhs(ops: Ops, j_mat: np.ndarray, gamma_mat: np.ndarray,
               moments, alpha: int) -> complex:
    """d<ops>/dt under the order-alpha closure, for arbitrary moment lookups."""
    return sum(c * closure_expectation(o, moments, alpha)
               for c, o in adjoint_rhs(ops, j_mat, gamma_mat))
