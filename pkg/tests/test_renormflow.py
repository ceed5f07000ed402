from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockspin.renormflow import (
    CouplingState,
    Functional,
    PolyData,
    SiteLattice,
    coupling_step,
    cross_terms,
    decompose_over_region,
    extract_alphas,
    gradient_integral,
    lambda_chain,
    linear_contributions,
    reblock,
    renormalized,
    run_flow,
    scale_down,
    shapes_up_to,
    square_integral,
    synthetic_functional,
    trajectory_csv,
)

LATTICES = [((16,), 2), ((8, 8), 2)]


def _region(lat):
    return [c for c in lat.cubes() if 1 <= c[0] <= 2]


@pytest.fixture(scope="module", params=[(shape, side, sym) for shape, side in LATTICES for sym in (False, True)],
                ids=lambda p: f"{len(p[0])}d-{'sym' if p[2] else 'raw'}")
def suite(request):
    shape, side, sym = request.param
    rng = np.random.default_rng(7)
    lat = SiteLattice(shape, side)
    return lat, synthetic_functional(lat, rng, symmetric=sym), sym


def _pair(lat):
    X = frozenset([(0,) * lat.d, (1,) + (0,) * (lat.d - 1)])
    return X, lat.sites(X)


@pytest.mark.parametrize("shape,side", LATTICES)
def test_constant_functional(shape, side):
    lat = SiteLattice(shape, side)
    X, sites = _pair(lat)
    al = extract_alphas(lat, X, PolyData(0.37 * len(sites) * lat.site_volume))
    assert al.alpha0 == pytest.approx(0.37)
    assert al.alpha2 == 0.0
    assert al.alpha2_mu == (0.0,) * lat.d


@pytest.mark.parametrize("shape,side", LATTICES)
def test_square_integral_normalization(shape, side):
    lat = SiteLattice(shape, side)
    X, sites = _pair(lat)
    al = extract_alphas(lat, X, square_integral(lat, sites))
    assert al.alpha0 == 0.0
    assert al.alpha2 == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(al.alpha2_mu, 0.0, atol=1e-14)


def test_gradient_coefficient_is_recovered():
    lat = SiteLattice((16,), 2)
    X, sites = _pair(lat)
    al = extract_alphas(lat, X, gradient_integral(lat, sites, 0, 0.8) + square_integral(lat, sites, 0.1))
    assert al.alpha2_mu[0] == pytest.approx(0.8, abs=1e-12)


def test_base_point_shift(suite):
    lat, F, _ = suite
    for X in [X for X in F.terms if F.is_small(X)][:6]:
        sites = lat.sites(X)
        ref = extract_alphas(lat, X, F.terms[X])
        for base in (int(sites[-1]), int(sites[len(sites) // 2])):
            moved = extract_alphas(lat, X, F.terms[X], base=base)
            np.testing.assert_allclose(moved.alpha2_mu, ref.alpha2_mu, atol=1e-12)


def test_black_box_matches_exact():
    lat = SiteLattice((16,), 2)
    F = synthetic_functional(lat, np.random.default_rng(3))
    X = next(X for X in F.terms if F.is_small(X))
    exact = extract_alphas(lat, X, F.terms[X])
    fd = extract_alphas(lat, X, func=F.terms[X])
    assert fd.alpha0 == pytest.approx(exact.alpha0, abs=1e-12)
    assert fd.alpha2 == pytest.approx(exact.alpha2, abs=1e-7)
    np.testing.assert_allclose(fd.alpha2_mu, exact.alpha2_mu, atol=1e-7)


def test_extract_needs_exactly_one_source():
    lat = SiteLattice((8,), 2)
    X = frozenset([(0,)])
    with pytest.raises(ValueError):
        extract_alphas(lat, X)
    with pytest.raises(ValueError):
        extract_alphas(lat, X, PolyData(), func=lambda p: 0.0)


def test_quadratic_functional_renormalizes_to_zero(rng):
    lat = SiteLattice((8, 8), 2)
    X, sites = _pair(lat)
    data = PolyData(1.3) + square_integral(lat, sites, -0.4) + gradient_integral(lat, sites, 1, 0.25)
    F = Functional(lat, {X: data})
    R = renormalized(F)
    for _ in range(5):
        assert abs(R(X, rng.normal(size=lat.n_sites))) < 1e-12


def test_quartic_part_survives(rng):
    lat = SiteLattice((16,), 2)
    X, sites = _pair(lat)
    quartic = PolyData.from_terms(0.0, [(0.9, (int(sites[0]),) * 4), (-0.2, tuple(int(s) for s in sites))])
    F = Functional(lat, {X: quartic + square_integral(lat, sites, 2.0) + PolyData(4.0)})
    R = renormalized(F)
    for _ in range(5):
        phi = rng.normal(size=lat.n_sites)
        assert R(X, phi) == pytest.approx(quartic(phi), abs=1e-12)


def test_reextraction_vanishes(suite):
    lat, F, _ = suite
    R = renormalized(F)
    for X in [X for X in R.terms if R.is_small(X)][:10]:
        al = extract_alphas(lat, X, R.terms[X])
        assert abs(al.alpha0) < 1e-12 and abs(al.alpha2) < 1e-12
        np.testing.assert_allclose(al.alpha2_mu, 0.0, atol=1e-12)


def test_large_polymers_pass_through(suite, rng):
    lat, F, _ = suite
    R = renormalized(F)
    phi = rng.normal(size=lat.n_sites)
    for X in [X for X in F.terms if not F.is_small(X)][:5]:
        assert R(X, phi) == F(X, phi)


def test_decomposition_identity(suite, rng):
    lat, F, _ = suite
    for _ in range(3):
        phi = rng.normal(size=lat.n_sites)
        D = decompose_over_region(F, _region(lat), phi)
        assert D.residual < 1e-11
        assert D.n_boundary > 0
        assert D.couplings.spread < 1e-12


def test_torus_region_has_no_boundary(suite, rng):
    lat, F, _ = suite
    D = decompose_over_region(F, lat.cubes(), rng.normal(size=lat.n_sites))
    assert D.n_boundary == 0 and D.boundary_sum == 0.0
    assert D.residual < 1e-11


def test_boundary_pieces_match_cross_terms(suite, rng):
    lat, F, _ = suite
    phi = rng.normal(size=lat.n_sites)
    D = decompose_over_region(F, _region(lat), phi)
    assert D.boundary_sum == pytest.approx(cross_terms(F, _region(lat), phi), abs=1e-11)


def test_symmetric_functional_has_no_drift(suite, rng):
    lat, F, sym = suite
    nu = decompose_over_region(F, lat.cubes(), rng.normal(size=lat.n_sites)).couplings.nu
    if sym:
        assert max(abs(v) for v in nu) < 1e-13
    else:
        assert max(abs(v) for v in nu) > 1e-6


def test_reblocking_preserves_totals(suite, rng):
    lat, F, _ = suite
    B = reblock(F, 2)
    assert B.lattice.cube_side == 2 * lat.cube_side
    for _ in range(3):
        phi = rng.normal(size=lat.n_sites)
        assert B.total(phi) == pytest.approx(F.total(phi), rel=1e-13, abs=1e-12)


@pytest.mark.parametrize("d,L", [(1, 2), (2, 2), (3, 2), (3, 3)])
def test_scaling_monomials(d, L):
    lat = SiteLattice((4,) * d, 2)
    data = PolyData.from_terms(1.5, [(1.0, (0,)), (1.0, (0, 1)), (1.0, (0, 0, 1)), (1.0, (0, 0, 1, 1))])
    S = scale_down(Functional(lat, {frozenset([(0,) * d]): data}), L)
    scaled = S.terms[frozenset([(0,) * d])]
    assert S.lattice.spacing == pytest.approx(1.0 / L)
    assert scaled.constant == 1.5
    for r, (c, _) in scaled.monomials.items():
        assert c[0] == pytest.approx(float(L) ** (-r * (d - 2) / 2))


@pytest.mark.parametrize("shape", [(16,), (8, 8)])
def test_linear_contributions_by_hand(shape):
    lat = SiteLattice(shape, 2)
    c, a, L = 0.7, 0.3, 2
    terms = {}
    for cube in lat.cubes():
        s = lat.sites([cube])
        terms[frozenset([cube])] = PolyData(c * len(s)) + square_integral(lat, s, a)
    got = linear_contributions(Functional(lat, terms), L)
    # a volume density c becomes c L^d and a mass a∫φ² becomes a L² ∫φ²
    assert got.L1 == pytest.approx(-c * L**lat.d)
    assert got.L2 == pytest.approx(-2 * a * L**2)
    assert got.nu == (0.0,) * lat.d


def test_zero_corrections_scale_purely():
    s = CouplingState(0, Fraction(1, 8), Fraction(3, 5), Fraction(-2, 7))
    nxt = coupling_step(s, 2)
    assert (nxt.k, nxt.lam, nxt.mu, nxt.eps) == (1, Fraction(1, 4), Fraction(12, 5), Fraction(-16, 7))


def test_corrections_add():
    s = CouplingState(0, 1.0, 1.0, 1.0)
    nxt = coupling_step(s, 3, d=3, L1=0.5, L2=0.25, eps_star=0.125, mu_star=2.0)
    assert (nxt.lam, nxt.mu, nxt.eps) == (3.0, 11.25, 27.625)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(1, 12), st.fractions(min_value=Fraction(1, 1000), max_value=1))
def test_lambda_chain_is_exact(L, N, lam):
    chain = lambda_chain(lam, N, L)
    assert chain[-1] == lam
    assert all(chain[k + 1] == L * chain[k] for k in range(N))
    assert [s.lam for s in run_flow(lam, N, L)] == chain


def test_flow_with_corrections_and_csv():
    states = run_flow(1.0, 3, 2, corrections=lambda s: (1.0, 0.0, 0.0, 0.0))
    assert [s.eps for s in states] == [0.0, 1.0, 9.0, 73.0]
    csv = trajectory_csv(states)
    assert csv.splitlines()[0] == "k,lambda,mu,eps"
    assert len(csv.splitlines()) == 5


def test_shape_enumeration_counts():
    assert [len([s for s in shapes_up_to(2, 4) if len(s) == n]) for n in (1, 2, 3, 4)] == [1, 2, 6, 19]
    assert len(shapes_up_to(1, 3)) == 3


def test_cube_side_must_divide():
    with pytest.raises(ValueError):
        SiteLattice((10,), 3)
