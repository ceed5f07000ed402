import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blockspin.blockavg import (
    MultiscaleField,
    MultiscaleLayout,
    apply_multiscale_Q,
    apply_Q,
    apply_Q_adjoint,
    averaging_operator,
    block_mean,
    completion_compose,
    tilde_completion,
)
from blockspin.geometry import Field, LatticeGeometry, Region, RegionSequence

from conftest import cell_mask

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_constant_averages_to_constant():
    g = LatticeGeometry(2, 0, 2, 1, d=2)
    f = Field(g, 0, np.full(g.shape, 2.5))
    np.testing.assert_allclose(apply_Q(f, 2).values, 2.5)


def test_hand_mean_in_one_dimension():
    g = LatticeGeometry(2, 0, 2, 0, d=1)
    f = Field(g, 0, np.array([1.0, 3.0, 5.0, 7.0]))
    np.testing.assert_array_equal(apply_Q(f, 1).values, [2.0, 6.0])


def test_block_mean_rejects_ragged_blocks():
    with pytest.raises(ValueError):
        block_mean(np.zeros(6), 4)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (16, 16), elements=finite))
def test_averaging_semigroup(values):
    g = LatticeGeometry(2, 0, 4, 0, d=2)
    f = Field(g, 0, values)
    twice = apply_Q(apply_Q(f, 1), 2)
    once = apply_Q(f, 3)
    assert twice.stride == once.stride == 3
    np.testing.assert_allclose(twice.values, once.values, atol=1e-14 * (1 + np.abs(values).max()))


def test_adjoint_is_block_constant_extension():
    g = LatticeGeometry(2, 0, 2, 0, d=1)
    F = Field(g, 1, np.array([4.0, -1.0]))
    np.testing.assert_array_equal(apply_Q_adjoint(F, 1).values, [4.0, 4.0, -1.0, -1.0])


@pytest.mark.parametrize("d", [1, 2, 3])
def test_QtQ_is_projection(d):
    g = LatticeGeometry(2, 0, 2, 0, d=d)
    sites = np.arange(g.n_sites)
    coarse = g.stride_indices(1)
    Q = averaging_operator(g, coarse, 1, sites, 0)
    P = Q.adjoint().compose(Q).matrix
    np.testing.assert_allclose(P @ P, P, atol=1e-14)


def test_adjoint_pairing_against_transpose(rng):
    g = LatticeGeometry(2, 0, 2, 0, d=2)
    sites = np.arange(g.n_sites)
    coarse = g.stride_indices(1)
    Q = averaging_operator(g, coarse, 1, sites, 0)
    for _ in range(10):
        f = rng.normal(size=len(sites))
        F = rng.normal(size=len(coarse))
        lhs = np.sum(Q.cod_w * F * Q.apply(f))
        rhs = np.sum(Q.dom_w * f * Q.adjoint().apply(F))
        assert lhs == pytest.approx(rhs, abs=1e-13)


def _two_level(g):
    n1 = g.n // g.L ** g.cube_exponent(1)
    n2 = g.n // g.L ** g.cube_exponent(2)
    return RegionSequence.standard(g, [cell_mask(n1, range(n1 - 1)), cell_mask(n2, [0])])


def test_multiscale_Q_of_constant_is_constant():
    g = LatticeGeometry(2, 0, 2, 1, d=1, k=2)
    seq = _two_level(g)
    out = apply_multiscale_Q(Field(g, 0, np.full(g.shape, -1.5)), seq)
    for comp in out.components:
        np.testing.assert_allclose(comp, -1.5)


def test_multiscale_Q_matches_block_means(rng):
    g = LatticeGeometry(2, 0, 2, 0, d=2, k=2)
    masks = [np.ones((2, 2), bool), np.ones((1, 1), bool)]
    masks[0][1, 1] = False
    masks[1][0, 0] = False
    seq = RegionSequence(g, (Region.from_mask(g, 1, masks[0]),))
    phi = rng.normal(size=g.shape)
    out = apply_multiscale_Q(Field(g, 0, phi), seq)
    expected = [phi[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean() for i, j in [(0, 0), (0, 1), (1, 0)]]
    np.testing.assert_allclose(out.components[0], expected, rtol=1e-14)


def test_full_sequence_with_only_top_region():
    g = LatticeGeometry(2, 0, 2, 0, d=1, k=2)
    seq = RegionSequence.full(g)
    lay = MultiscaleLayout(seq)
    assert len(lay.component(np.zeros(lay.size), 1)) == 0
    assert len(lay.component(np.zeros(lay.size), 2)) == 1


def test_layout_matrix_agrees_with_field_route(rng):
    g = LatticeGeometry(2, 0, 2, 1, d=1, k=2)
    seq = _two_level(g)
    lay = MultiscaleLayout(seq)
    phi = rng.normal(size=g.n_sites)
    direct = apply_multiscale_Q(Field(g, 0, phi.reshape(g.shape)), seq).to_vector()
    np.testing.assert_allclose(lay.Q_matrix() @ phi, direct, rtol=1e-14)


def test_multiscale_field_rejects_wrong_lengths():
    g = LatticeGeometry(2, 0, 2, 1, d=1, k=2)
    seq = _two_level(g)
    with pytest.raises(ValueError):
        MultiscaleField(seq, (np.zeros(3), np.zeros(1)))


@pytest.mark.parametrize("depth", [1, 2])
def test_completion_composes_to_top_average(depth, rng):
    # Omega_1 cubes must be unions of top-level blocks: m + 1 >= depth
    g = LatticeGeometry(2, 1, 2, 2, d=1, k=depth)
    seq = _two_level(g).truncate(depth)
    for _ in range(5):
        assert completion_compose(seq, rng.normal(size=g.n_sites)) < 1e-14


def test_tilde_completion_of_constant():
    g = LatticeGeometry(2, 0, 2, 1, d=1, k=2)
    seq = _two_level(g)
    tc = tilde_completion(Field(g, 2, np.full(g.stride_shape(2), 0.7)), seq)
    np.testing.assert_allclose(tc.exterior, 0.7)
    for comp in tc.field.components:
        np.testing.assert_allclose(comp, 0.7)


def test_tilde_completion_is_recovered_by_averaging(rng):
    g = LatticeGeometry(2, 0, 2, 1, d=1, k=2)
    seq = _two_level(g)
    Phi = rng.normal(size=g.stride_shape(2))
    tc = tilde_completion(Field(g, 2, Phi), seq)
    fine = np.repeat(Phi, 4)
    back = apply_multiscale_Q(Field(g, 0, fine), seq)
    for a, b in zip(back.components, tc.field.components):
        np.testing.assert_allclose(a, b, rtol=1e-14)
