"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from blockspin.blockavg import MultiscaleLayout
from blockspin.cluster import (
    SiteMeasure,
    exponentiate,
    full_pipeline,
    integrate_K,
    local_influence_defect,
    synthetic_activity,
)
from blockspin.fieldregions import (
    CubeLattice,
    SmallFieldParams,
    chi_q,
    chi_raw,
    chi_w,
    new_omega,
    partition_combined,
    partition_level0,
    partition_q,
    partition_w,
    thresholds,
)
from blockspin.flows import compare_flows, compare_free_flow
from blockspin.fluctuation import FluctuationProblem, spectral_sqrt, sqrt_via_integral
from blockspin.geometry import LatticeGeometry, Region, RegionSequence
from blockspin.greens import (
    RandomWalkExpansion,
    StepGeometry,
    decay_profile,
    dense_green,
    localization_gain,
    minimizer_bundle,
    verify_expansion_identities,
)
from blockspin.polymers import (
    CubeComplex,
    Polymer,
    count_labelled_trees,
    count_spanning_trees_matrix_tree,
    popcount,
    sum_bounds_suite,
    tree_lengths,
)
from blockspin.quadforms import ActionParams, laplacian_matrix, summation_by_parts
from blockspin.renormflow import SiteLattice, decompose_over_region, lambda_chain, run_flow, synthetic_functional

from conftest import cell_mask


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str, elapsed: float, budget: float) -> None:
        within = elapsed < budget
        status = "PASS" if ok and within else "FAIL"
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {status} {title}: {detail} ({elapsed:.1f}s of {budget:.0f}s)")
        assert ok, detail
        assert within, f"took {elapsed:.1f}s, budget {budget:.0f}s"

    return emit


def _log_slope(values) -> float:
    depths = np.arange(1, len(values) + 1)
    return float(np.polyfit(depths, np.log(values), 1)[0])


FLOW_CASES = [
    (LatticeGeometry(2, 0, 2, 2, d=1, k=2), [cell_mask(8, range(1, 7)), cell_mask(4, [1, 2])]),
    (LatticeGeometry(2, 0, 2, 2, d=1, k=2), [np.ones(8, bool), np.ones(4, bool)]),
    (LatticeGeometry(2, 0, 2, 0, d=2, k=2), [np.ones((2, 2), bool), np.ones((1, 1), bool)]),
    (LatticeGeometry(2, 0, 2, 2, d=1, k=2), [cell_mask(8, range(0, 6)), cell_mask(4, [0, 1])]),
]


def test_criterion_01_iterated_averaging(report):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for g, masks in FLOW_CASES:
        assert g.n_sites <= 16
        seq = RegionSequence.standard(g, masks)
        worst = max(worst, compare_flows(seq, ActionParams(1.3, 2, g.d, mu_bar=0.4), rng, samples=20).max_residual)
    report(1, "sequential averaging equals multiscale kernel", worst < 1e-9, f"max residual {worst:.2e}",
           time.perf_counter() - start, 10)


def test_criterion_02_free_flow(report):
    start = time.perf_counter()
    rng = np.random.default_rng(102)
    cases = [
        (LatticeGeometry(2, 0, 2, 1, d=1, k=2), [np.ones(4, bool), np.ones(2, bool)]),
        (LatticeGeometry(2, 0, 2, 1, d=1, k=2), [cell_mask(4, [0, 1, 2]), cell_mask(2, [0])]),
        (LatticeGeometry(2, 0, 2, 0, d=2, k=2), [np.ones((2, 2), bool), np.ones((1, 1), bool)]),
    ]
    worst = 0.0
    for g, masks in cases:
        seq = RegionSequence.standard(g, masks)
        worst = max(worst, compare_free_flow(seq, ActionParams(1.3, 2, g.d, mu_bar=0.4), rng, samples=20).max_residual)
    report(2, "free flow closed form", worst < 1e-9, f"max log-density residual {worst:.2e}",
           time.perf_counter() - start, 60)


def _greens_step():
    g = LatticeGeometry(2, 0, 2, 3, d=1, k=2)
    seq = RegionSequence.standard(g, [cell_mask(16, range(1, 15)), cell_mask(8, range(1, 7))])
    onext = Region.from_mask(g, 3, cell_mask(4, [1]))
    lam = Region.from_mask(g, 2, cell_mask(8, range(1, 6)))
    return StepGeometry(seq, onext), lam


def test_criterion_03_minimizer_identities(report):
    start = time.perf_counter()
    rng = np.random.default_rng(103)
    step, lam = _greens_step()
    g = step.geometry
    p = ActionParams(1.3, 2, 1, mu_bar=0.2)
    worst: dict[str, float] = {}
    for _ in range(100):
        Phi = rng.normal(size=step.layout.size)
        Pn = rng.normal(size=len(step.next_sites))
        ext = rng.normal(size=g.n_sites)
        out = verify_expansion_identities(step, p, lam, Phi, Pn, ext, rng.normal(size=len(step.inner_sites)))
        out.update(minimizer_bundle(step, p, Phi, Pn, ext).residuals)
        for name, val in out.items():
            worst[name] = max(worst.get(name, 0.0), float(val))
    top = max(worst.values())
    report(3, "minimizer identity suite", top < 1e-11, f"{len(worst)} identities x 100 instances, max {top:.2e}",
           time.perf_counter() - start, 30)


def test_criterion_04_summation_by_parts(report):
    start = time.perf_counter()
    rng = np.random.default_rng(104)
    g = LatticeGeometry(2, 0, 3, 0, d=1)
    pairs = [(rng.normal(size=8), rng.normal(size=8)) for _ in range(50)]
    worst = 0.0
    for bits in itertools.product([False, True], repeat=8):
        mask = np.array(bits)
        for f, h in pairs:
            worst = max(worst, abs(summation_by_parts(g, f, h, mask)))
    report(4, "summation by parts on the 8-torus", worst < 1e-13, f"256 regions x 50 pairs, max {worst:.2e}",
           time.perf_counter() - start, 5)


def _fluctuation_problems():
    out = []
    g = LatticeGeometry(2, 1, 2, 4, d=1, k=1)
    seq = RegionSequence.standard(g, [np.ones(16, bool)])
    p = ActionParams(1.0, 2, 1, mu_bar=0.0)
    for cells in ([2, 3, 4], [1, 2, 3, 4, 5], [3]):
        out.append(FluctuationProblem(StepGeometry(seq, Region.from_mask(g, 3, cell_mask(8, cells))), p))
    return out


def test_criterion_05_resolvent_identity(report):
    start = time.perf_counter()
    problems = _fluctuation_problems()
    g2 = LatticeGeometry(2, 0, 1, 3, d=2, k=1)
    seq2 = RegionSequence.standard(g2, [np.ones((8, 8), bool)])
    problems[-1] = FluctuationProblem(StepGeometry(seq2, Region.full(g2, 2)), ActionParams(1.3, 2, 2, mu_bar=0.4))
    worst = max(prob.resolvent_identity_residual(r) for prob in problems for r in (0.0, 0.1, 1.0, 10.0, 100.0, 1e4))
    report(5, "resolvent identity", worst < 1e-11, f"3 geometries x 6 r, max {worst:.2e}",
           time.perf_counter() - start, 30)


def test_criterion_06_square_root(report):
    start = time.perf_counter()
    covariances = [prob.covariance for prob in _fluctuation_problems()]
    g = LatticeGeometry(2, 0, 2, 2, d=2)
    lap = laplacian_matrix(g, np.arange(g.n_sites), "neumann")
    for mass in (1e-3, 0.1):
        covariances.append(np.linalg.inv(lap + mass * np.eye(g.n_sites)))
    gaps, certified = [], []
    for C in covariances:
        assert len(C) <= 256
        res = sqrt_via_integral(C)
        gaps.append(float(np.max(np.abs(res.value - spectral_sqrt(C)))))
        certified.append(res.within_certificate)
    ok = max(gaps) < 1e-6 and all(certified)
    report(6, "integral square root", ok, f"{len(gaps)} covariances, max gap {max(gaps):.2e}, certified {all(certified)}",
           time.perf_counter() - start, 60)


def test_criterion_07_localization(report):
    start = time.perf_counter()
    slopes = []
    monotone = True
    for prob in _fluctuation_problems():
        norms = [prob.localized_sqrt(r).delta_norm for r in (1, 2, 3)]
        monotone &= norms[0] > norms[1] > norms[2]
        slopes.append(_log_slope(norms))
    g = LatticeGeometry(2, 1, 2, 4, d=1, k=2)
    for cell in (3, 5):
        for mu in (0.0, 0.3):
            cube = Region.from_mask(g, 3, np.eye(8, dtype=bool)[cell])
            # worst case over data bounded by one; single random draws need not be monotone
            gain = localization_gain(cube, ActionParams(1.0, 2, 1, mu_bar=mu))
            vals = [gain[r] for r in (1, 2, 3)]
            monotone &= vals[0] > vals[1] > vals[2]
            slopes.append(_log_slope(vals))
    ok = monotone and max(slopes) < 0
    report(7, "localization improves with depth", ok, f"{len(slopes)} geometries, worst log-slope {max(slopes):.2f}",
           time.perf_counter() - start, 60)


def _walk_layout(d, m, mvol):
    g = LatticeGeometry(2, m, 2, mvol, d=d, k=2)
    n1 = g.n // 2 ** (m + 1)
    n2 = g.n // 2 ** (m + 2)
    top = np.zeros((n2,) * d, bool)
    top[(0,) * d] = True
    seq = RegionSequence.standard(g, [np.ones((n1,) * d, bool), top])
    return seq, MultiscaleLayout(seq)


def test_criterion_08_random_walk(report):
    start = time.perf_counter()
    errors, ratios, gammas = [], [], []
    p = {1: ActionParams(1.0, 2, 1), 2: ActionParams(1.0, 2, 2)}
    for d, m, mvol in [(1, 2, 4), (1, 3, 4), (2, 2, 3)]:
        seq, lay = _walk_layout(d, m, mvol)
        walk = RandomWalkExpansion.from_params(lay, p[d])
        diag = walk.partial_sums(12)
        G = dense_green(lay, p[d]).matrix
        errors.append(float(diag.errors(G)[-1]))
        ratios.append(max(diag.ratios))
        gammas.append(decay_profile(G, seq, derivatives=False).gamma_hat("G"))
    ok = max(errors) < 1e-8 and max(ratios) < 1 and min(gammas) > 0
    detail = f"max error {max(errors):.2e}, max ratio {max(ratios):.3f}, min rate {min(gammas):.3f}"
    report(8, "random walk expansion", ok, detail, time.perf_counter() - start, 120)


def test_criterion_09_cluster_expansion(report):
    start = time.perf_counter()
    gaps, influence = [], []
    for shape, hole in [((3, 2), (1, 0)), ((2, 3), (1, 1)), ((2, 2), (1, 1)), ((5, 1), (2, 0)), ((6, 1), (0, 0))]:
        for field_dependent in (True, False):
            cx = CubeComplex.grid(shape)
            omega = cx.full_mask & ~cx.mask_of([hole])
            system = synthetic_activity(cx, omega, omega, 0.05, 1.0, np.random.default_rng(109), field_dependent)
            mu = SiteMeasure.fair_pm1()
            ext = np.zeros(cx.n_cubes)
            gaps.append(full_pipeline(system, mu, ext).relative_gap)
            hs = exponentiate(integrate_K(system, mu, ext), omega, 12)
            rng = np.random.default_rng(9)
            for Y in sorted(hs.values, key=popcount)[:4]:
                influence.append(local_influence_defect(system, mu, ext, Y, rng))
    ok = max(gaps) < 1e-8 and max(influence) < 1e-14
    report(9, "cluster expansion with a hole", ok, f"max gap {max(gaps):.2e}, max influence {max(influence):.2e}",
           time.perf_counter() - start, 60)


def _dihedral_key(points: np.ndarray) -> tuple:
    best = None
    for swap in (False, True):
        for sx, sy in itertools.product((1, -1), repeat=2):
            q = points[:, ::-1] if swap else points
            q = q * np.array([sx, sy])
            q = q - q.min(axis=0)
            key = tuple(sorted(map(tuple, q.tolist())))
            best = key if best is None or key < best else best
    return best


def test_criterion_10_polymer_combinatorics(report):
    start = time.perf_counter()
    # every subset of at most 5 cubes in a 5x5 window, up to lattice symmetry
    cx = CubeComplex.grid((5, 5))
    seen = set()
    lengths_ok = True
    for r in range(1, 6):
        for combo in itertools.combinations(range(25), r):
            key = _dihedral_key(np.array([cx.origin(i) for i in combo]))
            if key in seen:
                continue
            seen.add(key)
            tm = tree_lengths(Polymer(cx, sum(1 << i for i in combo)))
            lengths_ok &= tm.chain_holds and all(tm.length_comparisons(2))
    small = CubeComplex.grid((3, 3))
    kwargs = dict(anchor=4, cap=8, superset_bases=[0, small.mask_of([(1, 1)])], omega_mask=small.full_mask & ~1)
    first = sum_bounds_suite(small, [1.0, 4.0, 8.0], **kwargs)
    measured = {k: v for k, v in first.thresholds.items() if not k.endswith("_rhs") and math.isfinite(v)}
    at_threshold = sum_bounds_suite(small, sorted(set(measured.values())), **kwargs)
    sums_ok = all(row.holds for row in at_threshold.rows if row.kappa >= measured.get(row.name, math.inf))
    cayley_ok = all(count_labelled_trees(n) == count_spanning_trees_matrix_tree(n) == n ** (n - 2) for n in range(2, 8))
    ok = lengths_ok and sums_ok and cayley_ok and "connected_sum" in measured
    detail = (f"{len(seen)} shapes, length comparisons {lengths_ok}, sums at thresholds {sums_ok} "
              f"(connected_sum from {measured.get('connected_sum', math.inf):.2f}), Cayley {cayley_ok}")
    report(10, "polymer combinatorics", ok, detail, time.perf_counter() - start, 120)


def test_criterion_11_partitions_of_unity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(111)
    lat = CubeLattice((3, 3), 2)
    prm = SmallFieldParams(lam=0.01, N=3, layer_factor=1)
    k, layers = 1, 1
    th_raw, th_q, th_w = (thresholds(prm, k, v) for v in ("raw0", "q", "w"))
    p = prm.p_k(k)
    counts = dict.fromkeys(("level0", "q", "w", "combined"), 0)
    exact = dict.fromkeys(counts, True)
    mixed = 0
    for _ in range(100):
        chi0 = chi_raw(lat, rng.normal(size=lat.shape) * p * rng.uniform(0.1, 0.4), th_raw)
        chiq = chi_q(lat, rng.normal(size=lat.shape) * p * rng.uniform(0.2, 1.0), np.zeros(lat.shape), th_q)
        chiw = chi_w(lat, rng.normal(size=lat.shape) * th_w.residual * rng.uniform(0.2, 0.8), th_w)
        mixed += int(0 < chi0.sum() < 9) + int(0 < chiq.sum() < 9) + int(0 < chiw.sum() < 9)
        lam_bar = rng.random((3, 3)) < 0.7
        omega = new_omega(np.ones((3, 3), bool), ~chi0, layers)
        reports = {
            "level0": partition_level0(chi0, layers),
            "q": partition_q(chiq, lam_bar, layers),
            "w": partition_w(chi0, chiw, omega, layers),
            "combined": partition_combined(chiq, lambda om: chi0, chiw, lam_bar, layers),
        }
        for name, rep in reports.items():
            counts[name] += 1
            exact[name] &= rep.exact and rep.expanded == 1
    ok = all(exact.values()) and min(counts.values()) >= 100 and mixed > 0
    report(11, "partitions of unity", ok, f"{min(counts.values())} samples per identity, exact {exact}, mixed indicators {mixed}",
           time.perf_counter() - start, 30)


def test_criterion_12_renormalization(report):
    start = time.perf_counter()
    rng = np.random.default_rng(112)
    residual, nu = 0.0, 0.0
    for shape in [(16,), (8, 8)]:
        lat = SiteLattice(shape, 2)
        region = [c for c in lat.cubes() if 1 <= c[0] <= 2]
        for sym in (False, True):
            F = synthetic_functional(lat, rng, symmetric=sym)
            for _ in range(3):
                dec = decompose_over_region(F, region, rng.normal(size=lat.n_sites))
                residual = max(residual, dec.residual)
                if sym:
                    nu = max(nu, max(abs(v) for v in dec.couplings.nu))
    chain_ok = all(
        [s.lam for s in run_flow(Fraction(1, 3), N, L)] == lambda_chain(Fraction(1, 3), N, L)
        and lambda_chain(Fraction(1, 3), N, L)[-1] == Fraction(1, 3)
        for L in (2, 3)
        for N in (1, 5, 10)
    )
    ok = residual < 1e-11 and nu < 1e-13 and chain_ok
    report(12, "renormalization decomposition", ok, f"residual {residual:.2e}, drift {nu:.2e}, chain exact {chain_ok}",
           time.perf_counter() - start, 10)
