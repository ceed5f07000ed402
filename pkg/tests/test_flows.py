import numpy as np
import pytest

from blockspin.flows import compare_flows, compare_free_flow, multiscale_kernel_density, sequential_flow
from blockspin.geometry import LatticeGeometry, RegionSequence
from blockspin.quadforms import ActionParams

CASES = {
    "1d-margin": (LatticeGeometry(2, 0, 2, 2, d=1, k=2), [np.array([0, 1, 1, 1, 1, 1, 1, 0], bool), np.array([0, 1, 1, 0], bool)]),
    "1d-full": (LatticeGeometry(2, 0, 2, 2, d=1, k=2), [np.ones(8, bool), np.ones(4, bool)]),
    "2d-full": (LatticeGeometry(2, 0, 1, 1, d=2, k=2), [np.ones((2, 2), bool), np.ones((1, 1), bool)]),
    "2d-corner": (LatticeGeometry(2, 0, 1, 1, d=2, k=1), [np.array([[1, 0], [0, 0]], bool)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_sequential_and_multiscale_routes_agree(name, rng):
    g, masks = CASES[name]
    seq = RegionSequence.standard(g, masks)
    p = ActionParams(1.3, 2, g.d, mu_bar=0.4)
    assert compare_flows(seq, p, rng, samples=5).max_residual < 1e-9


@pytest.mark.parametrize("name", sorted(CASES))
def test_free_flow_closed_form(name, rng):
    g, masks = CASES[name]
    seq = RegionSequence.standard(g, masks)
    p = ActionParams(1.3, 2, g.d, mu_bar=0.4)
    assert compare_free_flow(seq, p, rng, samples=5).max_residual < 1e-9


def test_routes_carry_the_same_variables():
    g, masks = CASES["1d-margin"]
    seq = RegionSequence.standard(g, masks)
    p = ActionParams(1.0, 2, 1)
    assert set(sequential_flow(seq, p).labels) == set(multiscale_kernel_density(seq, p).labels)


def test_massless_and_massive_differ(rng):
    g, masks = CASES["1d-full"]
    seq = RegionSequence.standard(g, masks)
    a = compare_flows(seq, ActionParams(1.3, 2, 1, mu_bar=0.0), np.random.default_rng(3), samples=2)
    b = compare_flows(seq, ActionParams(1.3, 2, 1, mu_bar=0.5), np.random.default_rng(3), samples=2)
    assert a.log_values[0][0] != pytest.approx(b.log_values[0][0])
