"""Cumulant solver: RHS algebra, closure exactness, blow-up guards, ensembles."""

import numpy as np
import pytest

from dipolarray.couplings import coupling_matrices
from dipolarray.cumulant import (
    ClosureBlowupError,
    ClosureOrder,
    CumulantState,
    EnsembleConfig,
    ObservableTrace,
    _checked_state,
    _layout,
    cumulant_rhs,
    ensemble_run,
    evolve_cumulant,
    initial_cumulant_state,
    make_time_grid,
    read_trace_csv,
    write_trace_csv,
)
from dipolarray.exact import InitialStateSpec, evolve_exact
from dipolarray.geometry import DisorderSpec, LatticeSpec, build_array
from dipolarray.moment_algebra import closed_rhs, moments_from_density
from dipolarray.seeding import STREAM_ENSEMBLE, derive_seed

from test_moment_algebra import random_density


def _sorted_ops(*ops):
    return tuple(sorted(ops, key=lambda ak: ak[0]))


def state_from_density(rho, order):
    """Tracked correlators extracted from a density matrix."""
    n = rho.shape[0].bit_length() - 1
    mom = moments_from_density(rho)
    pop = np.array([mom(((i, "n"),)).real for i in range(n)])
    state = CumulantState(order=order, populations=pop)
    if order.alpha >= 2:
        c = np.zeros((n, n), dtype=complex)
        nn = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if i != j:
                    c[i, j] = mom(_sorted_ops((i, "sp"), (j, "sm")))
                    nn[i, j] = mom(_sorted_ops((i, "n"), (j, "n"))).real
        np.fill_diagonal(c, pop)
        np.fill_diagonal(nn, pop)
        state.coherences, state.pair_populations = c, nn
    if order.alpha == 3:
        t = np.zeros((n, n, n), dtype=complex)
        t3 = np.zeros((n, n, n))
        for x in range(n):
            for i in range(n):
                for j in range(n):
                    if len({x, i, j}) == 3:
                        t[x, i, j] = mom(_sorted_ops((x, "n"), (i, "sp"), (j, "sm")))
                        t3[x, i, j] = mom(_sorted_ops((x, "n"), (i, "n"), (j, "n"))).real
        ar = np.arange(n)
        t[ar, ar, :] = state.coherences
        t[ar, :, ar] = 0
        t[:, ar, ar] = state.pair_populations
        for fix in ((ar, ar, slice(None)), (ar, slice(None), ar),
                    (slice(None), ar, ar)):
            t3[fix] = state.pair_populations
        state.triple_coherences, state.triple_populations = t, t3
    if order.coherent_sector:
        state.amplitudes = np.array([mom(((i, "sm"),)) for i in range(n)])
        w = np.zeros((n, n), dtype=complex)
        smat = np.zeros((n, n), dtype=complex)
        for i in range(n):
            for j in range(n):
                if i != j:
                    w[i, j] = mom(_sorted_ops((i, "n"), (j, "sm")))
                    smat[i, j] = mom(_sorted_ops((i, "sm"), (j, "sm")))
        if order.alpha >= 2:
            state.pop_amplitudes, state.amp_pairs = w, smat
    return state


SECTORS = [ClosureOrder(1, False), ClosureOrder(1, True),
           ClosureOrder(2, False), ClosureOrder(2, True),
           ClosureOrder(3, False)]


@pytest.mark.parametrize("order", SECTORS, ids=lambda o: f"a{o.alpha}{'c' if o.coherent_sector else 'i'}")
@pytest.mark.parametrize("n_atoms,seed", [(4, 0), (5, 1)])
def test_rhs_matches_symbolic_engine(order, n_atoms, seed):
    """Every tracked derivative must equal the symbolic closure, entry by entry."""
    arr = build_array(LatticeSpec(1, n_atoms, 0.34), seed=0)
    cm = coupling_matrices(arr)
    rho = random_density(n_atoms, seed, u1_symmetric=not order.coherent_sector)
    mom = moments_from_density(rho)
    state = state_from_density(rho, order)
    d = cumulant_rhs(state, cm, order)

    def want(*ops):
        return closed_rhs(_sorted_ops(*ops), cm.J, cm.Gamma, mom, order.alpha)

    for i in range(n_atoms):
        assert abs(d.populations[i] - want((i, "n")).real) < 1e-10
    if order.alpha >= 2:
        for i in range(n_atoms):
            for j in range(i + 1, n_atoms):
                assert abs(d.coherences[i, j] - want((i, "sp"), (j, "sm"))) < 1e-10
                assert abs(d.pair_populations[i, j]
                           - want((i, "n"), (j, "n")).real) < 1e-10
    if order.alpha == 3:
        for x in range(n_atoms):
            for i in range(n_atoms):
                for j in range(i + 1, n_atoms):
                    if x not in (i, j):
                        got = d.triple_coherences[x, i, j]
                        assert abs(got - want((x, "n"), (i, "sp"), (j, "sm"))) < 1e-10
        for x in range(n_atoms):
            for y in range(x + 1, n_atoms):
                for z in range(y + 1, n_atoms):
                    got = d.triple_populations[x, y, z]
                    assert abs(got - want((x, "n"), (y, "n"), (z, "n")).real) < 1e-10
    if order.coherent_sector:
        for i in range(n_atoms):
            assert abs(d.amplitudes[i] - want((i, "sm"))) < 1e-10
        if order.alpha >= 2:
            for i in range(n_atoms):
                for j in range(n_atoms):
                    if i != j:
                        assert abs(d.pop_amplitudes[i, j]
                                   - want((i, "n"), (j, "sm"))) < 1e-10
            for i in range(n_atoms):
                for j in range(i + 1, n_atoms):
                    assert abs(d.amp_pairs[i, j]
                               - want((i, "sm"), (j, "sm"))) < 1e-10


@pytest.mark.parametrize("order", SECTORS, ids=lambda o: f"a{o.alpha}{'c' if o.coherent_sector else 'i'}")
def test_flux_identity_structural(order):
    """dN_e/dt = -sum_ij Gamma_ij <s_i^dag s_j> at random states to 1e-12."""
    n_atoms = 5
    arr = build_array(LatticeSpec(1, n_atoms, 0.42), seed=0)
    cm = coupling_matrices(arr)
    rho = random_density(n_atoms, 7, u1_symmetric=not order.coherent_sector)
    state = state_from_density(rho, order)
    d = cumulant_rhs(state, cm, order)
    if order.alpha == 1:
        b = state.amplitudes if order.coherent_sector else np.zeros(n_atoms, complex)
        c = np.outer(b.conj(), b)
        np.fill_diagonal(c, state.populations)
    else:
        c = state.coherences
    rate = (cm.Gamma * c.real).sum()
    assert abs(d.populations.sum() + rate) < 1e-12


def test_mean_field_inverted_is_pure_exponential():
    arr = build_array(LatticeSpec(2, 2, 0.316), seed=0)
    cm = coupling_matrices(arr)
    t = np.linspace(0, 4, 41)
    trace = evolve_cumulant(InitialStateSpec.fully_inverted(), arr, cm,
                            ClosureOrder(1, False), t, rtol=1e-11, atol=1e-13)
    assert np.abs(trace.n_excited - 4 * np.exp(-t)).max() < 1e-8


@pytest.mark.parametrize("order", SECTORS, ids=lambda o: f"a{o.alpha}{'c' if o.coherent_sector else 'i'}")
def test_single_atom_exponential(order):
    arr = build_array(LatticeSpec(1, 1, 0.3), seed=0)
    cm = coupling_matrices(arr)
    t = np.linspace(0, 5, 26)
    init = (InitialStateSpec.coherent_pulse(np.pi / 2) if order.coherent_sector
            else InitialStateSpec.fully_inverted())
    trace = evolve_cumulant(init, arr, cm, order, t, rtol=1e-11, atol=1e-13)
    p0 = init.p_excited
    assert np.abs(trace.n_excited - p0 * np.exp(-t)).max() < 1e-8


@pytest.mark.parametrize("init", [
    InitialStateSpec.fully_inverted(),
    InitialStateSpec.incoherent(0.5),
    InitialStateSpec.coherent_pulse(2.0, k_laser=(1.0, 0.0, 0.0)),
    InitialStateSpec.coherent_pulse(0.6, k_laser=(0.3, 0.7, 0.0), phase_offset=0.4),
], ids=["inverted", "p05", "theta2", "theta06"])
def test_alpha2_exact_at_two_atoms(init):
    """The order-2 closure is exact at N=2: no third atom exists to truncate."""
    arr = build_array(LatticeSpec(1, 2, 0.316), seed=0)
    cm = coupling_matrices(arr)
    t = np.linspace(0, 4, 33)
    order = ClosureOrder(2, coherent_sector=init.coherent)
    trace = evolve_cumulant(init, arr, cm, order, t, rtol=1e-10, atol=1e-12)
    exact = evolve_exact(init, arr, cm, t, rtol=1e-10, atol=1e-12)
    assert np.abs(trace.n_excited - exact.n_excited).max() < 1e-6
    assert np.abs(trace.emission_rate - exact.emission_rate).max() < 1e-6
    assert np.abs(trace.m_perp_sq - exact.m_perp_sq).max() < 1e-6


@pytest.mark.parametrize("p", [1.0, 0.7])
def test_alpha3_exact_at_three_atoms(p):
    """At N=3 no four-atom product exists, so alpha=3 is untruncated."""
    arr = build_array(LatticeSpec(1, 3, 0.35), seed=0)
    cm = coupling_matrices(arr)
    t = np.linspace(0, 4, 33)
    trace = evolve_cumulant(InitialStateSpec.incoherent(p), arr, cm,
                            ClosureOrder(3, False), t, rtol=1e-10, atol=1e-12)
    exact = evolve_exact(InitialStateSpec.incoherent(p), arr, cm, t,
                         rtol=1e-10, atol=1e-12)
    assert np.abs(trace.n_excited - exact.n_excited).max() < 1e-6
    assert np.abs(trace.emission_rate - exact.emission_rate).max() < 1e-6


def test_alpha2_tracks_exact_at_six_atoms():
    arr = build_array(LatticeSpec(2, 3, 0.316), seed=0)
    cm = coupling_matrices(arr)
    t = np.linspace(0, 3, 31)
    trace = evolve_cumulant(InitialStateSpec.fully_inverted(), arr, cm,
                            ClosureOrder(2, False), t)
    exact = evolve_exact(InitialStateSpec.fully_inverted(), arr, cm, t)
    rel = np.abs(trace.n_excited - exact.n_excited) / exact.n_excited.max()
    assert rel.max() < 0.05


def test_superradiant_burst_at_order2():
    arr = build_array(LatticeSpec(4, 4, 0.316), seed=0)
    cm = coupling_matrices(arr)
    t = np.linspace(0, 2, 41)
    trace = evolve_cumulant(InitialStateSpec.fully_inverted(), arr, cm,
                            ClosureOrder(2, False), t)
    gamma_t = trace.gamma_normalized
    assert np.nanmax(gamma_t) > 1.0
    assert np.nanargmax(gamma_t) > 0  # burst develops at t > 0


def test_weak_coherent_pulse_beats_inverted_initial_rate():
    arr = build_array(LatticeSpec(4, 4, 0.316), seed=0)
    cm = coupling_matrices(arr)
    theta = 2 * np.arcsin(np.sqrt(0.1))
    init = InitialStateSpec.coherent_pulse(theta, k_laser=(1.0, 0.0, 0.0))
    t = np.array([0.0, 0.01])
    coh = evolve_cumulant(init, arr, cm, ClosureOrder(2, True), t)
    inv = evolve_cumulant(InitialStateSpec.fully_inverted(), arr, cm,
                          ClosureOrder(2, False), t)
    assert coh.gamma_normalized[0] > inv.gamma_normalized[0]


def test_u1_sector_stays_dark():
    """Zero initial amplitudes stay exactly zero in the coherent sector."""
    arr = build_array(LatticeSpec(2, 2, 0.4), seed=0)
    cm = coupling_matrices(arr)
    order = ClosureOrder(2, True)
    state = initial_cumulant_state(InitialStateSpec.incoherent(0.8),
                                   build_array(LatticeSpec(2, 2, 0.4), seed=0),
                                   order)
    d = cumulant_rhs(state, cm, order)
    assert np.abs(d.amplitudes).max() == 0.0
    assert np.abs(d.pop_amplitudes).max() == 0.0
    assert np.abs(d.amp_pairs).max() == 0.0


def test_permutation_covariance():
    arr = build_array(LatticeSpec(1, 4, 0.38), seed=0)
    cm = coupling_matrices(arr)
    perm = np.array([2, 0, 3, 1])
    arr_p = type(arr)(positions=arr.positions[perm], occupied=arr.occupied,
                      site_rc=arr.site_rc[perm], spacing=arr.spacing,
                      lattice_shape=arr.lattice_shape, drive=arr.drive)
    cm_p = type(cm)(J=cm.J[np.ix_(perm, perm)], Gamma=cm.Gamma[np.ix_(perm, perm)])
    init = InitialStateSpec.coherent_pulse(1.3, k_laser=(1.0, 0.0, 0.0))
    t = np.linspace(0, 2, 11)
    a = evolve_cumulant(init, arr, cm, ClosureOrder(2, True), t)
    b = evolve_cumulant(init, arr_p, cm_p, ClosureOrder(2, True), t)
    np.testing.assert_allclose(a.populations, b.populations[:, np.argsort(perm)],
                               atol=1e-8)
    np.testing.assert_allclose(a.n_excited, b.n_excited, atol=1e-8)


def test_checked_state_guards():
    order = ClosureOrder(2, False)
    layout = _layout(3, order)
    arr = build_array(LatticeSpec(1, 3, 0.4), seed=0)
    good = initial_cumulant_state(InitialStateSpec.incoherent(0.5), arr, order)
    y = layout.pack(good)
    state, excess = _checked_state(y, layout, 0.0)
    assert excess <= 0.0

    bad = y.copy()
    bad[0] = 1.5  # population way outside [0, 1]
    with pytest.raises(ClosureBlowupError, match="population"):
        _checked_state(bad, layout, 2.5)
    try:
        _checked_state(bad, layout, 2.5)
    except ClosureBlowupError as err:
        assert err.time == 2.5

    soft = y.copy()
    soft[0] = 1.0 + 5e-5  # between soft and hard thresholds: clamp, no raise
    _, excess = _checked_state(soft, layout, 1.0)
    assert 0 < excess < 1e-3

    big = y.copy()
    big[-1] = 11.0
    with pytest.raises(ClosureBlowupError, match="magnitude"):
        _checked_state(big, layout, 0.5)

    non_finite = y.copy()
    non_finite[1] = np.nan
    with pytest.raises(ClosureBlowupError, match="non-finite"):
        _checked_state(non_finite, layout, 0.1)


def test_alpha3_rejects_coherent():
    with pytest.raises(ValueError):
        ClosureOrder(3, True)
    arr = build_array(LatticeSpec(1, 3, 0.4), seed=0)
    cm = coupling_matrices(arr)
    with pytest.raises(ValueError, match="incoherent"):
        evolve_cumulant(InitialStateSpec.coherent_pulse(1.0), arr, cm,
                        ClosureOrder(3, False), [0.0, 1.0])


def test_coherent_init_requires_coherent_sector():
    arr = build_array(LatticeSpec(1, 2, 0.4), seed=0)
    cm = coupling_matrices(arr)
    with pytest.raises(ValueError, match="coherent_sector"):
        evolve_cumulant(InitialStateSpec.coherent_pulse(1.0), arr, cm,
                        ClosureOrder(2, False), [0.0, 1.0])


def test_make_time_grid_shape():
    t = make_time_grid(dense_until=5.0, end=20.0, dense_step=0.1, log_points=30)
    assert t[0] == 0.0
    assert abs(t[-1] - 20.0) < 1e-12
    assert np.all(np.diff(t) > 0)
    head = t[t <= 5.0 + 1e-9]
    np.testing.assert_allclose(np.diff(head), 0.1, atol=1e-12)
    assert len(t) == len(head) + 30
    short = make_time_grid(dense_until=5.0, end=5.0, dense_step=0.1)
    assert short[-1] <= 5.0 + 1e-9


def test_ensemble_single_realization_matches_direct_call():
    cfg = EnsembleConfig(lattice=LatticeSpec(2, 2, 0.4, fill_probability=0.8),
                         init=InitialStateSpec.fully_inverted(),
                         order=ClosureOrder(2, False),
                         times=tuple(np.linspace(0, 2, 9)))
    ens = ensemble_run(cfg, realizations=1, master_seed=11)
    seed0 = derive_seed(11, STREAM_ENSEMBLE, 0)
    arr = build_array(cfg.lattice, seed=seed0)
    cm = coupling_matrices(arr)
    direct = evolve_cumulant(cfg.init, arr, cm, cfg.order, np.asarray(cfg.times))
    np.testing.assert_array_equal(ens.n_excited, direct.n_excited)
    np.testing.assert_array_equal(ens.emission_rate, direct.emission_rate)
    assert ens.n_realizations == 1
    assert np.all(ens.stderr["n_excited"] == 0)


def test_ensemble_deterministic_and_zero_variance_when_nothing_random():
    cfg = EnsembleConfig(lattice=LatticeSpec(2, 2, 0.35),
                         init=InitialStateSpec.fully_inverted(),
                         order=ClosureOrder(2, False),
                         times=tuple(np.linspace(0, 1, 5)))
    a = ensemble_run(cfg, realizations=10, master_seed=3)
    b = ensemble_run(cfg, realizations=10, master_seed=3)
    np.testing.assert_array_equal(a.n_excited, b.n_excited)
    assert np.abs(a.stderr["n_excited"]).max() < 1e-14


def test_ensemble_stderr_scales_with_realizations():
    cfg = EnsembleConfig(lattice=LatticeSpec(2, 2, 0.45, fill_probability=0.7),
                         init=InitialStateSpec.fully_inverted(),
                         order=ClosureOrder(2, False),
                         times=(0.0, 0.5, 1.0))
    small = ensemble_run(cfg, realizations=25, master_seed=5)
    large = ensemble_run(cfg, realizations=100, master_seed=5)
    # stderr ~ 1/sqrt(R): ratio should be near 2, generously bracketed
    ratio = small.stderr["n_excited"][1:] / large.stderr["n_excited"][1:]
    assert np.all(ratio > 1.2) and np.all(ratio < 3.2)


def test_ensemble_failure_manifest():
    cfg = EnsembleConfig(lattice=LatticeSpec(1, 1, 0.4, fill_probability=0.3),
                         init=InitialStateSpec.fully_inverted(),
                         order=ClosureOrder(2, False),
                         times=(0.0, 0.5))
    ens = ensemble_run(cfg, realizations=30, master_seed=2)
    assert ens.failures  # some single-site draws come up empty
    assert ens.n_realizations + len(ens.failures) == 30
    for r, message in ens.failures:
        assert "EmptyRealizationError" in message


def test_trace_csv_roundtrip(tmp_path):
    arr = build_array(LatticeSpec(1, 2, 0.4), seed=0)
    cm = coupling_matrices(arr)
    t = np.linspace(0, 1, 5)
    trace = evolve_cumulant(InitialStateSpec.fully_inverted(), arr, cm,
                            ClosureOrder(2, False), t)
    path = tmp_path / "trace.csv"
    write_trace_csv(path, trace)
    back = read_trace_csv(path)
    np.testing.assert_array_equal(back["t"], t)
    np.testing.assert_array_equal(back["n_excited"], trace.n_excited)
    np.testing.assert_array_equal(back["gamma_normalized"], trace.gamma_normalized)
    assert "stderr_n_excited" not in back

    cfg = EnsembleConfig(lattice=LatticeSpec(1, 2, 0.4, fill_probability=0.9),
                         init=InitialStateSpec.fully_inverted(),
                         order=ClosureOrder(2, False), times=tuple(t))
    ens = ensemble_run(cfg, realizations=3, master_seed=1)
    write_trace_csv(path, ens)
    back = read_trace_csv(path)
    assert "stderr_n_excited" in back


def test_snapshots_recorded_on_grid():
    arr = build_array(LatticeSpec(1, 3, 0.4), seed=0)
    cm = coupling_matrices(arr)
    t = np.linspace(0, 2, 9)
    trace = evolve_cumulant(InitialStateSpec.fully_inverted(), arr, cm,
                            ClosureOrder(2, False), t, snapshot_times=[0.0, 1.0])
    assert set(trace.snapshots) == {0.0, 1.0}
    snap = trace.snapshots[1.0]
    assert snap["pair_populations"].shape == (3, 3)
    with pytest.raises(ValueError, match="grid"):
        evolve_cumulant(InitialStateSpec.fully_inverted(), arr, cm,
                        ClosureOrder(2, False), t, snapshot_times=[0.33])
