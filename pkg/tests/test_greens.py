import numpy as np
import pytest

from blockspin.blockavg import MultiscaleLayout
from blockspin.geometry import LatticeGeometry, Region, RegionSequence
from blockspin.greens import (
    RandomWalkExpansion,
    StepGeometry,
    decay_profile,
    dense_green,
    green_generator,
    local_green,
    localization_error,
    localization_gain,
    localized_field,
    minimizer_bundle,
    phi_k_omega,
    s_interpolation_derivative,
    minimizer_sup_constant,
    verify_expansion_identities,
    well_inside,
)
from blockspin.quadforms import ActionParams, laplacian_matrix

from conftest import cell_mask


def _step():
    g = LatticeGeometry(2, 0, 2, 3, d=1, k=2)
    seq = RegionSequence.standard(g, [cell_mask(16, range(1, 15)), cell_mask(8, range(1, 7))])
    onext = Region.from_mask(g, 3, cell_mask(4, [1]))
    lam = Region.from_mask(g, 2, cell_mask(8, range(1, 6)))
    return StepGeometry(seq, onext), lam


def _walk_layout(d, m, mvol, mu=0.0):
    g = LatticeGeometry(2, m, 2, mvol, d=d, k=2)
    n1 = g.n // 2 ** (m + 1)
    n2 = g.n // 2 ** (m + 2)
    top = np.zeros((n2,) * d, bool)
    top[(0,) * d] = True
    seq = RegionSequence.standard(g, [np.ones((n1,) * d, bool), top])
    return MultiscaleLayout(seq), ActionParams(1.0, 2, d, mu_bar=mu)


def test_green_inverts_its_generator():
    g = LatticeGeometry(2, 0, 1, 3, d=1, k=1)
    seq = RegionSequence.standard(g, [cell_mask(8, range(1, 7))])
    lay = MultiscaleLayout(seq)
    p = ActionParams(1.3, 2, 1, mu_bar=0.2)
    H, _ = green_generator(lay, p)
    G = dense_green(lay, p)
    np.testing.assert_allclose(G.matrix @ H, np.eye(len(H)), atol=1e-12)
    assert G.symmetry_defect() < 1e-12


def test_green_without_averaging_is_massive_dirichlet_inverse():
    g = LatticeGeometry(2, 0, 1, 3, d=1, k=1)
    seq = RegionSequence.standard(g, [cell_mask(8, range(2, 6))])
    lay = MultiscaleLayout(seq)
    p = ActionParams(1e-14, 2, 1, mu_bar=0.7)
    sites = seq.omega(1).sites(0)
    expected = np.linalg.inv(laplacian_matrix(g, sites) + 0.7 * np.eye(len(sites)))
    np.testing.assert_allclose(dense_green(lay, p).matrix, expected, atol=1e-10)


def test_dirichlet_monotonicity():
    g = LatticeGeometry(2, 0, 1, 3, d=1, k=1)
    p = ActionParams(1.0, 2, 1, mu_bar=0.1)
    big = RegionSequence.standard(g, [cell_mask(8, range(0, 7))])
    small = RegionSequence.standard(g, [cell_mask(8, range(1, 6))])
    Gb = dense_green(MultiscaleLayout(big), p)
    Gs = dense_green(MultiscaleLayout(small), p)
    pos_b = {int(s): i for i, s in enumerate(Gb.dom)}
    for i, x in enumerate(Gs.dom):
        for j, y in enumerate(Gs.dom):
            assert Gs.matrix[i, j] <= Gb.matrix[pos_b[int(x)], pos_b[int(y)]] + 1e-14


def test_minimizer_of_zero_data_is_zero():
    step, _ = _step()
    p = ActionParams(1.3, 2, 1, mu_bar=0.2)
    b = minimizer_bundle(step, p, np.zeros(step.layout.size), np.zeros(len(step.next_sites)), np.zeros(step.geometry.n_sites))
    for arr in (b.phi, b.psi, b.phi0, b.psi_plus):
        assert np.all(arr == 0)


def test_expansion_identities(rng):
    step, lam = _step()
    p = ActionParams(1.3, 2, 1, mu_bar=0.2)
    g = step.geometry
    for _ in range(5):
        out = verify_expansion_identities(
            step,
            p,
            lam,
            rng.normal(size=step.layout.size),
            rng.normal(size=len(step.next_sites)),
            rng.normal(size=g.n_sites),
            rng.normal(size=len(step.inner_sites)),
        )
        assert max(out.values()) < 1e-11, out


def test_variational_residuals_vanish(rng):
    step, _ = _step()
    p = ActionParams(1.3, 2, 1, mu_bar=0.2)
    b = minimizer_bundle(
        step, p, rng.normal(size=step.layout.size), rng.normal(size=len(step.next_sites)), rng.normal(size=step.geometry.n_sites)
    )
    assert max(b.residuals.values()) < 1e-11


def test_minimizer_sup_constant_is_finite(rng):
    step, _ = _step()
    c = minimizer_sup_constant(step.layout, ActionParams(1.3, 2, 1, mu_bar=0.2), rng, samples=5)
    assert 0 < c < 10


def test_neumann_local_green_on_detached_cube_is_inverse_mass():
    g = LatticeGeometry(2, 0, 3, 0, d=1)
    sites = np.arange(2, 5)
    mass = 0.3
    G = local_green(g, sites, np.arange(8), mass * np.eye(3))
    np.testing.assert_allclose(G @ np.ones(3), np.ones(3) / mass, rtol=1e-12)


@pytest.mark.parametrize("d,m,mvol", [(1, 2, 4), (1, 3, 4), (2, 2, 3)])
def test_random_walk_converges_to_dense_green(d, m, mvol):
    lay, p = _walk_layout(d, m, mvol)
    walk = RandomWalkExpansion.from_params(lay, p)
    diag = walk.partial_sums(12)
    exact = dense_green(lay, p).matrix
    assert diag.spectral_radius < 1
    assert diag.errors(exact)[-1] < 1e-8
    assert all(r < 1 for r in diag.ratios)


def test_walk_with_all_steps_weakened_is_parametrix():
    lay, p = _walk_layout(1, 2, 4)
    walk = RandomWalkExpansion.from_params(lay, p)
    off = walk.restricted(np.zeros(walk.n_cubes, bool))
    np.testing.assert_allclose(off, walk.parametrix, atol=1e-14)
    np.testing.assert_allclose(walk.full(), dense_green(lay, p).matrix, atol=1e-10)


def test_s_derivative_contour_matches_finite_difference():
    lay, p = _walk_layout(1, 2, 4)
    walk = RandomWalkExpansion.from_params(lay, p)
    ratios = []
    for kappa in (0.0, 1.0, 2.0):
        sd = s_interpolation_derivative(walk, 1, kappa)
        assert sd.agreement < 1e-8
        ratios.append(sd.bound_ratio)
    # the Cauchy estimate holds and tightens as the contour grows
    assert all(r <= 1 + 1e-12 for r in ratios)
    assert ratios[0] <= ratios[1] <= ratios[2]


def test_decay_profile_positive_rate_and_mass_direction():
    g = LatticeGeometry(2, 2, 2, 4, d=1, k=2)
    seq = RegionSequence.standard(g, [cell_mask(8, [7, 0, 1, 2]), cell_mask(4, [0])])
    lay = MultiscaleLayout(seq)
    rates = []
    for mu in (0.0, 1.0):
        G = dense_green(lay, ActionParams(1.0, 2, 1, mu_bar=mu)).matrix
        prof = decay_profile(G, seq, derivatives=False)
        rates.append(prof.gamma_hat("G"))
        assert prof.to_csv().startswith("j,j_prime,y,y_prime,d_Omega,value,kind")
    assert rates[0] > 0
    assert rates[1] > rates[0]


def test_localized_field_of_constant_is_constant():
    g = LatticeGeometry(2, 1, 2, 4, d=1, k=2)
    cube = Region.from_mask(g, 3, np.eye(8, dtype=bool)[3])
    phi, _ = localized_field(cube, 1, np.full(g.stride_shape(2), 1.7), ActionParams(1.0, 2, 1))
    np.testing.assert_allclose(phi, 1.7, atol=1e-12)


def test_localized_field_ignores_far_data(rng):
    g = LatticeGeometry(2, 1, 2, 4, d=1, k=2)
    cube = Region.from_mask(g, 3, np.eye(8, dtype=bool)[3])
    p = ActionParams(1.0, 2, 1)
    top = rng.normal(size=g.stride_shape(2))
    phi, seq = localized_field(cube, 1, top, p)
    reach = seq.omega(1).enlarge(1).site_mask(2).ravel()
    moved = top.copy()
    moved[~reach] += 5.0
    phi2, _ = localized_field(cube, 1, moved, p)
    np.testing.assert_array_equal(phi[cube.sites(0)], phi2[cube.sites(0)])
    assert well_inside(cube, 1, Region.full(g, 3))


def test_localization_error_decreases_with_depth(rng):
    g = LatticeGeometry(2, 1, 2, 4, d=1, k=2)
    cube = Region.from_mask(g, 3, np.eye(8, dtype=bool)[3])
    err = localization_error(cube, rng.normal(size=g.stride_shape(2)), ActionParams(1.0, 2, 1))
    assert err[1] > err[2] > err[3] > 0


def test_localization_gain_bounds_every_unit_field(rng):
    g = LatticeGeometry(2, 1, 2, 4, d=1, k=2)
    cube = Region.from_mask(g, 3, np.eye(8, dtype=bool)[3])
    p = ActionParams(1.0, 2, 1, mu_bar=0.3)
    gain = localization_gain(cube, p)
    assert gain[1] > gain[2] > gain[3] > 0
    for _ in range(10):
        err = localization_error(cube, rng.uniform(-1, 1, size=g.stride_shape(2)), p)
        assert all(err[r] <= gain[r] + 1e-14 for r in gain)


def test_localization_gain_is_translation_invariant():
    g = LatticeGeometry(2, 1, 2, 4, d=1, k=2)
    p = ActionParams(1.0, 2, 1)
    a = localization_gain(Region.from_mask(g, 3, np.eye(8, dtype=bool)[3]), p)
    b = localization_gain(Region.from_mask(g, 3, np.eye(8, dtype=bool)[5]), p)
    assert all(a[r] == pytest.approx(b[r], rel=1e-10) for r in a)
