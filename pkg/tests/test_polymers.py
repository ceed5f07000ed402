import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockspin import polymers
from blockspin.polymers import (
    CapExceeded,
    CubeComplex,
    Polymer,
    connected_sum,
    count_labelled_trees,
    count_spanning_trees_matrix_tree,
    distance_dM,
    superset_sum_bound,
    superset_sum,
    enumerate_by_filter,
    enumerate_polymers,
    grow_connected_py,
    is_mod_holes,
    labelled_trees,
    one_point_tree_length,
    popcount,
    prufer_decode,
    reblock,
    size_histogram,
    smallest_kappa,
    steiner_tree_length,
    sum_bounds_suite,
    tree_lengths,
)


def test_single_cubes():
    cx = CubeComplex.grid((3, 4))
    assert len(enumerate_polymers(cx, 1)) == 12


def test_counts_on_six_by_six_grid_match_filter_route():
    cx = CubeComplex.grid((6, 6))
    grown = enumerate_polymers(cx, 4)
    filtered = enumerate_by_filter(cx, 4)
    assert {p.mask for p in grown} == {p.mask for p in filtered}
    # frozen from the independent filter route
    assert size_histogram(p.mask for p in grown) == {1: 36, 2: 60, 3: 148, 4: 381}


def test_mod_holes_enumeration_matches_predicate():
    cx = CubeComplex.grid((3, 3))
    omega = cx.full_mask & ~(1 << 4)
    grown = enumerate_polymers(cx, 8, "mod_holes", omega)
    filtered = enumerate_by_filter(cx, 8, lambda m: is_mod_holes(cx, m, omega))
    assert {p.mask for p in grown} == {p.mask for p in filtered}
    assert len(grown) == 217


def test_mod_holes_contains_hole_whole_or_not_at_all():
    cx = CubeComplex.grid((3, 1))
    omega = cx.mask_of([(0, 0), (2, 0)])
    masks = {p.mask for p in enumerate_polymers(cx, 3, "mod_holes", omega)}
    assert masks == {0b001, 0b100, 0b011, 0b110, 0b111, 0b010}


def test_cap_guard():
    cx = CubeComplex.grid((2, 2))
    with pytest.raises(CapExceeded):
        enumerate_polymers(cx, polymers.DEFAULT_CAP + 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**20), st.integers(1, 6))
def test_compiled_and_python_growth_agree(n, seed, cap):
    rng = np.random.default_rng(seed)
    adj = np.triu(rng.random((n, n)) < 0.4, 1)
    adj = adj | adj.T
    nbrs = [sum(1 << j for j in range(n) if adj[i, j]) for i in range(n)]
    weights = [int(w) for w in rng.integers(1, 3, n)]
    py = sorted(grow_connected_py(nbrs, weights, cap))
    assert sorted(polymers._grow_connected(nbrs, weights, cap)) == py
    assert len(set(py)) == len(py)


def test_backend_reported():
    assert polymers.BACKEND in ("cython", "python")


@pytest.mark.parametrize("n", range(1, 8))
def test_cayley_counts(n):
    expected = n ** (n - 2) if n > 1 else 1
    assert count_labelled_trees(n) == expected
    assert count_spanning_trees_matrix_tree(n) == expected


def test_prufer_decoding_gives_distinct_trees():
    trees = {frozenset(frozenset(e) for e in t) for t in labelled_trees(5)}
    assert len(trees) == 125
    assert all(len(t) == 4 for t in trees)
    assert sorted(map(sorted, prufer_decode([3, 3], 4))) == [[0, 3], [1, 3], [2, 3]]


def test_adjacent_cubes_lengths():
    cx = CubeComplex.grid((3, 3))
    tm = tree_lengths(Polymer(cx, cx.mask_of([(0, 0), (0, 1)])))
    assert tm.ell_prime == pytest.approx(1.0)
    assert tm.ell == pytest.approx(0.0)


def test_tree_length_comparisons_on_small_shapes():
    cx = CubeComplex.grid((4, 4))
    seen = set()
    for r in range(1, 5):
        for combo in itertools.combinations(range(16), r):
            Y = Polymer(cx, sum(1 << i for i in combo))
            key = Y.shape_key()
            if key in seen:
                continue
            seen.add(key)
            tm = tree_lengths(Y)
            assert tm.chain_holds
            assert all(tm.length_comparisons(2)), key


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=2, max_size=4, unique=True))
def test_half_grid_lengths_stable_under_refinement(cubes):
    cx = CubeComplex.grid((4, 4))
    origins = np.array([cx.origin(i) for i in cubes])
    assert one_point_tree_length(origins, 0.5)[0] == pytest.approx(one_point_tree_length(origins, 0.25)[0], abs=1e-12)
    assert steiner_tree_length(origins, 0.5)[1] == pytest.approx(steiner_tree_length(origins, 0.25)[1], abs=1e-12)


def test_distance_single_cube_and_inside_omega():
    cx = CubeComplex.grid((3, 3))
    single = Polymer(cx, cx.mask_of([(1, 1)]))
    assert distance_dM(single)[0] == 0.0
    X = Polymer(cx, cx.mask_of([(0, 0), (1, 0), (2, 0), (1, 1)]))
    assert distance_dM(X, cx.full_mask)[0] == distance_dM(X)[0]


def test_mod_distance_counts_only_the_gap():
    cx = CubeComplex.grid((4, 1))
    X = Polymer(cx, cx.full_mask)
    omega = cx.mask_of([(0, 0), (3, 0)])
    # the two omega cubes are met at their inner faces, two cubes apart
    assert distance_dM(X, omega)[0] == pytest.approx(2.0)
    assert distance_dM(X)[0] == pytest.approx(2.0)


def test_reblock_identity_and_cover():
    cx = CubeComplex.grid((4, 4))
    coarse_block = Polymer(cx, cx.mask_of([(0, 0), (0, 1), (1, 0), (1, 1)]))
    assert popcount(reblock(coarse_block, 2).mask) == 1
    bent = reblock(Polymer(cx, cx.mask_of([(1, 1), (2, 1), (2, 2)])), 2)
    assert popcount(bent.mask) == 3


def test_reblock_connects_diagonal_cover():
    cx = CubeComplex.grid((4, 4))
    diag = reblock(Polymer(cx, cx.mask_of([(1, 1), (2, 2), (3, 3)])), 2)
    assert diag.complex.is_connected(diag.mask)
    assert popcount(diag.mask) == 3


def test_superset_sum_of_empty_set_is_one():
    cx = CubeComplex.grid((3, 3))
    assert superset_sum(cx, 0, 1.0) == 1.0
    assert superset_sum_bound(cx, 0, 1.0, 4) == 1.0


def test_smallest_kappa_on_monotone_predicate():
    assert smallest_kappa(lambda k: k >= 2.5) == pytest.approx(2.5, abs=1e-9)
    assert smallest_kappa(lambda k: False) == math.inf


def test_connected_sum_decreases_in_kappa():
    hist = {1: 1, 2: 4, 3: 18}
    assert connected_sum(hist, 2.0) > connected_sum(hist, 3.0)


def test_sum_bounds_hold_at_threshold():
    cx = CubeComplex.grid((3, 3))
    rep = sum_bounds_suite(cx, [1.0, 4.0, 8.0], anchor=4, cap=8, superset_bases=[0, cx.mask_of([(1, 1)])], omega_mask=cx.full_mask & ~1)
    assert rep.thresholds["connected_sum"] < rep.thresholds["connected_sum_proof"]
    for row in rep.rows:
        if row.kappa >= rep.thresholds.get(row.name, math.inf):
            assert row.holds, row
    assert rep.to_csv().splitlines()[0] == "name,kappa,lhs,rhs,holds,truncated,note"
