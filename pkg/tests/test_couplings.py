import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dipolarray.couplings import (
    CouplingMatrices,
    MotionSpec,
    cached_coupling_matrices,
    coupling_cache_key,
    coupling_matrices,
    find_local_maxima,
    green_tensor,
    jump_spectrum,
    read_couplings_text,
    resonance_onsets,
    spectrum_scan,
    write_couplings_text,
)
from dipolarray.geometry import (
    DisorderSpec,
    DriveGeometry,
    EmptyRealizationError,
    LatticeSpec,
    build_array,
    dicke_array,
    dipole_vector,
)

K = 2 * np.pi


def reference_green(r):
    """Independent dyadic-formula oracle: build the full 3x3 tensor."""
    r = np.asarray(r, dtype=float)
    rn = np.linalg.norm(r)
    u = K * rn
    rhat = r / rn
    scal = np.exp(1j * u) / (4 * np.pi * rn)
    term_i = (1 + 1j / u - 1 / u**2) * np.eye(3)
    term_r = (-1 - 3j / u + 3 / u**2) * np.outer(rhat, rhat)
    return scal * (term_i + term_r)


def reference_pair(r, e_dip, gamma0=1.0):
    g = np.conj(e_dip) @ reference_green(r) @ e_dip
    return -1.5 * gamma0 * g.real, 3.0 * gamma0 * g.imag


def test_green_far_field_falloff():
    direction = np.array([0.3, -0.5, 0.81])
    direction /= np.linalg.norm(direction)
    near = np.linalg.norm(green_tensor(direction))
    far = np.linalg.norm(green_tensor(1e3 * direction))
    assert far < 1e-3 * near


def test_green_symmetric_and_even():
    r = np.array([0.21, -0.34, 0.12])
    g = green_tensor(r)
    np.testing.assert_allclose(g, g.T, atol=1e-15)
    np.testing.assert_allclose(g, green_tensor(-r), atol=1e-15)


def test_green_imaginary_part_short_distance_limit():
    target = K / (6 * np.pi)
    rng = np.random.default_rng(4)
    for _ in range(5):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        raw = rng.normal(size=3) + 1j * rng.normal(size=3)
        e = raw / np.sqrt(np.vdot(raw, raw).real)
        val = (np.conj(e) @ green_tensor(1e-4 * direction).imag @ e).real
        assert abs(val - target) < 1e-6 * target


def test_green_rejects_zero():
    with pytest.raises(ValueError):
        green_tensor([0.0, 0.0, 0.0])


def test_single_atom():
    cm = coupling_matrices(build_array(LatticeSpec(1, 1, 0.3), seed=0))
    np.testing.assert_array_equal(cm.J, [[0.0]])
    np.testing.assert_array_equal(cm.Gamma, [[1.0]])


def test_dicke_limit():
    cm = coupling_matrices(dicke_array(3))
    np.testing.assert_array_equal(cm.Gamma, np.ones((3, 3)))
    np.testing.assert_array_equal(cm.J, np.zeros((3, 3)))


def test_two_atom_against_dyadic_oracle():
    arr = build_array(LatticeSpec(rows=1, cols=2, spacing=0.316), seed=0)
    cm = coupling_matrices(arr)
    e = dipole_vector(arr.drive)
    j_ref, g_ref = reference_pair(arr.atom_positions[0] - arr.atom_positions[1], e)
    assert abs(cm.J[0, 1] - j_ref) < 1e-10
    assert abs(cm.Gamma[0, 1] - g_ref) < 1e-10


def test_colocated_pair_superradiant_sign():
    arr = build_array(LatticeSpec(rows=1, cols=2, spacing=1e-4), seed=0)
    cm = coupling_matrices(arr)
    assert cm.Gamma[0, 1] > 0.99


def test_duplicate_positions_rejected():
    spec = LatticeSpec(rows=1, cols=2, spacing=0.3)
    arr = build_array(spec, seed=0)
    squashed = arr.positions.copy()
    squashed[1] = squashed[0]
    bad = type(arr)(positions=squashed, occupied=arr.occupied, site_rc=arr.site_rc,
                    spacing=arr.spacing, lattice_shape=arr.lattice_shape,
                    drive=arr.drive)
    with pytest.raises(ValueError, match="duplicate"):
        coupling_matrices(bad)


def test_motion_zero_widths_bitwise_identical():
    arr = build_array(LatticeSpec(rows=2, cols=3, spacing=0.4), seed=1)
    point = coupling_matrices(arr)
    mot = coupling_matrices(arr, MotionSpec(widths=(0.0, 0.0, 0.0), samples=10))
    assert np.array_equal(point.J, mot.J)
    assert np.array_equal(point.Gamma, mot.Gamma)


def test_motion_shrinks_pair_coupling():
    arr = build_array(LatticeSpec(rows=1, cols=2, spacing=0.316), seed=0)
    point = coupling_matrices(arr)
    mot = coupling_matrices(arr, MotionSpec(samples=100_000, seed=5))
    assert abs(mot.Gamma[0, 1]) < abs(point.Gamma[0, 1])
    assert mot.Gamma[0, 0] == 1.0
    assert mot.Gamma[1, 1] == 1.0


def test_motion_deterministic_in_seed():
    arr = build_array(LatticeSpec(rows=2, cols=2, spacing=0.4), seed=2)
    a = coupling_matrices(arr, MotionSpec(samples=2000, seed=9))
    b = coupling_matrices(arr, MotionSpec(samples=2000, seed=9))
    c = coupling_matrices(arr, MotionSpec(samples=2000, seed=10))
    assert np.array_equal(a.Gamma, b.Gamma) and np.array_equal(a.J, b.J)
    assert not np.array_equal(a.Gamma, c.Gamma)


def test_motion_preserves_trace_identity():
    arr = build_array(LatticeSpec(rows=3, cols=3, spacing=0.35), seed=3)
    mot = coupling_matrices(arr, MotionSpec(samples=5000, seed=1))
    rates = jump_spectrum(mot).rates
    assert abs(rates.sum() - arr.n_atoms) < 1e-10 * arr.n_atoms


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 3), cols=st.integers(1, 3),
       spacing=st.floats(0.2, 1.5), sigma=st.floats(0.0, 0.08),
       seed=st.integers(0, 10_000))
def test_matrix_invariants_random_geometries(rows, cols, spacing, sigma, seed):
    arr = build_array(LatticeSpec(rows=rows, cols=cols, spacing=spacing),
                      DisorderSpec(sigma=sigma), seed=seed)
    cm = coupling_matrices(arr)
    n = cm.n_atoms
    assert np.array_equal(cm.J, cm.J.T)
    assert np.array_equal(cm.Gamma, cm.Gamma.T)
    np.testing.assert_array_equal(np.diag(cm.J), np.zeros(n))
    np.testing.assert_array_equal(np.diag(cm.Gamma), np.ones(n))
    assert np.abs(cm.Gamma).max() <= 1 + 1e-9
    assert np.linalg.eigvalsh(cm.Gamma).min() >= -1e-9 * n


def test_distance_decay():
    e = dipole_vector(DriveGeometry())
    vals = []
    for r in (5.0, 50.0, 500.0):
        arr = build_array(LatticeSpec(rows=1, cols=2, spacing=r), seed=0)
        vals.append(np.abs(coupling_matrices(arr).Gamma[0, 1]))
    assert vals[0] <= 0.2
    assert vals[0] > vals[1] > vals[2]


def test_jump_spectrum_dicke_degenerate():
    sp = jump_spectrum(coupling_matrices(dicke_array(5)))
    np.testing.assert_allclose(sp.rates, [5, 0, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(sp.modes.T @ sp.modes, np.eye(5), atol=1e-10)


def test_jump_spectrum_descending_deterministic_signs():
    arr = build_array(LatticeSpec(rows=3, cols=4, spacing=0.45),
                      DisorderSpec(sigma=0.03), seed=8)
    sp = jump_spectrum(coupling_matrices(arr))
    assert np.all(np.diff(sp.rates) <= 0)
    for k in range(sp.modes.shape[1]):
        nz = np.flatnonzero(np.abs(sp.modes[:, k]) > 1e-12)
        assert sp.modes[nz[0], k] > 0
    # eigen-equation actually holds
    cm = coupling_matrices(arr)
    np.testing.assert_allclose(cm.Gamma @ sp.modes, sp.modes * sp.rates, atol=1e-10)


def test_resonance_onsets_at_commensurate_spacings():
    spacings = np.round(np.arange(0.44, 0.7801, 0.005), 4)
    var = []
    for a in spacings:
        arr = build_array(LatticeSpec(rows=12, cols=12, spacing=float(a)), seed=0)
        var.append(np.var(jump_spectrum(coupling_matrices(arr)).rates))
    onsets = resonance_onsets(spacings, var)
    assert any(abs(x - 0.5) <= 0.02 for x in onsets)
    assert any(abs(x - 1 / np.sqrt(2)) <= 0.02 for x in onsets)
    # each onset is preceded by a local minimum just below the commensurate point
    minima = [spacings[i] for i in range(1, len(spacings) - 1)
              if var[i] < var[i - 1] and var[i] <= var[i + 1]]
    assert any(0.46 <= m < 0.5 for m in minima)
    assert any(0.66 <= m < 1 / np.sqrt(2) for m in minima)


def test_spectrum_scan_zero_sigma_percentiles_collapse():
    scan = spectrum_scan(LatticeSpec(rows=4, cols=4, spacing=0.4),
                         [0.4, 0.5], DisorderSpec(sigma=0.0), realizations=3)
    np.testing.assert_array_equal(scan["var_rate_p25"], scan["var_rate_median"])
    np.testing.assert_array_equal(scan["var_rate_median"], scan["var_rate_p75"])
    np.testing.assert_array_equal(scan["max_rate_p25"], scan["max_rate_p75"])


def test_spectrum_scan_deterministic():
    spec = LatticeSpec(rows=3, cols=3, spacing=0.4, fill_probability=0.8)
    a = spectrum_scan(spec, [0.35, 0.45], DisorderSpec(sigma=0.02), 5, master_seed=3)
    b = spectrum_scan(spec, [0.35, 0.45], DisorderSpec(sigma=0.02), 5, master_seed=3)
    for key in a:
        np.testing.assert_array_equal(a[key], b[key])


def test_spectrum_scan_retries_empty_realizations():
    # fill 0.3 on a 1x2 lattice: empty loadings are common, retries recover
    spec = LatticeSpec(rows=1, cols=2, spacing=0.4, fill_probability=0.3)
    scan = spectrum_scan(spec, [0.4], DisorderSpec(), realizations=4, master_seed=0)
    assert np.isfinite(scan["var_rate_median"]).all()
    # fill 0 can never load: bounded retries then the rejection propagates
    dead = LatticeSpec(rows=1, cols=1, spacing=0.4, fill_probability=0.0)
    with pytest.raises(EmptyRealizationError):
        spectrum_scan(dead, [0.4], DisorderSpec(), realizations=1, max_retries=3)


def test_find_local_maxima():
    xs = [0, 1, 2, 3, 4]
    assert find_local_maxima(xs, [0, 2, 1, 3, 0]) == [1.0, 3.0]
    assert find_local_maxima(xs, [0, 1, 2, 3, 4]) == []


def test_cache_roundtrip(tmp_path):
    arr = build_array(LatticeSpec(rows=2, cols=2, spacing=0.45), seed=4)
    first = cached_coupling_matrices(arr, cache_dir=tmp_path)
    files = list(tmp_path.glob("couplings-*.npz"))
    assert len(files) == 1
    second = cached_coupling_matrices(arr, cache_dir=tmp_path)
    np.testing.assert_array_equal(first.J, second.J)
    np.testing.assert_array_equal(first.Gamma, second.Gamma)


def test_cache_key_sensitivity():
    arr = build_array(LatticeSpec(rows=2, cols=2, spacing=0.45), seed=4)
    other = build_array(LatticeSpec(rows=2, cols=2, spacing=0.46), seed=4)
    base = coupling_cache_key(arr)
    assert base != coupling_cache_key(other)
    assert base != coupling_cache_key(arr, MotionSpec())
    assert base == coupling_cache_key(arr, MotionSpec(widths=(0, 0, 0)))


def test_text_roundtrip(tmp_path):
    arr = build_array(LatticeSpec(rows=2, cols=3, spacing=0.37),
                      DisorderSpec(sigma=0.01), seed=6)
    cm = coupling_matrices(arr)
    path = tmp_path / "couplings.txt"
    write_couplings_text(path, cm)
    back = read_couplings_text(path)
    np.testing.assert_array_equal(back.J, cm.J)
    np.testing.assert_array_equal(back.Gamma, cm.Gamma)
    assert back.gamma0 == cm.gamma0


def test_coupling_matrices_validation():
    good_j = np.zeros((2, 2))
    good_g = np.eye(2)
    with pytest.raises(ValueError, match="symmetric"):
        CouplingMatrices(J=np.array([[0.0, 1.0], [0.5, 0.0]]), Gamma=good_g)
    with pytest.raises(ValueError, match="diagonal"):
        CouplingMatrices(J=np.array([[0.5, 0.0], [0.0, 0.0]]), Gamma=good_g)
    with pytest.raises(ValueError, match="diagonal"):
        CouplingMatrices(J=good_j, Gamma=2 * np.eye(2))
    with pytest.raises(ValueError, match="exceed"):
        g = np.array([[1.0, 1.5], [1.5, 1.0]])
        CouplingMatrices(J=good_j, Gamma=g)
    with pytest.raises(ValueError, match="semidefinite"):
        # |entries| <= gamma0 yet indefinite (needs N >= 3: for N = 2 the
        # bound check already implies positive semidefiniteness)
        g = np.array([[1.0, 0.9, 0.9], [0.9, 1.0, -0.9], [0.9, -0.9, 1.0]])
        CouplingMatrices(J=np.zeros((3, 3)), Gamma=g)


def test_motion_spec_validation():
    with pytest.raises(ValueError):
        MotionSpec(widths=(0.05, -0.01, 0.1))
    with pytest.raises(ValueError):
        MotionSpec(excited_band_probability=1.5)
    with pytest.raises(ValueError):
        MotionSpec(samples=0)
