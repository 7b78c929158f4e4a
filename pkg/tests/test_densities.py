import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bohmlab.configspace import Grid, Potential, make_state
from bohmlab.densities import CellDensity, SpectralDensity
from conftest import GAUSS, ground_recipe

GROUND = stats.norm(scale=math.sqrt(0.5))


@pytest.fixture(scope="module")
def ground_model(line512):
    return SpectralDensity.of(make_state(line512, ground_recipe()))


def test_whole_domain_and_half_line(ground_model):
    assert ground_model.box_masses([[[-16, 16]]])[0] == pytest.approx(1, abs=1e-12)
    assert ground_model.box_masses([[[-16, 0]]])[0] == pytest.approx(0.5, abs=1e-12)


def test_interval_masses_match_normal_cdf(ground_model):
    edges = np.array([[-1, 1], [0.03, 0.07], [-2.5, 0.3], [1.0, 1.0]])
    got = ground_model.box_masses(edges[:, None, :])
    want = GROUND.cdf(edges[:, 1]) - GROUND.cdf(edges[:, 0])
    assert np.max(np.abs(got - want)) < 1e-12
    assert got[0] == pytest.approx(math.erf(1), abs=1e-12)


def test_cdf_and_cell_masses(ground_model, line512):
    x = np.linspace(-5, 5, 101)
    assert np.max(np.abs(ground_model.cdf(x) - GROUND.cdf(x))) < 1e-12
    cells = ground_model.cell_masses()
    assert cells.sum() == pytest.approx(1, abs=1e-12)
    h = line512.spacing[0] / 2
    xs = line512.axis(0)
    assert np.max(np.abs(cells - (GROUND.cdf(xs + h) - GROUND.cdf(xs - h)))) < 1e-12


def test_two_dimensional_boxes():
    g = Grid.square(-10, 10, 64)
    model = SpectralDensity.of(make_state(g, {"kind": "eigenstate", "potential": Potential.harmonic(), "n": [0, 0]}))
    got = model.box_masses([[[-1, 1], [0, 10]], [[-10, 10], [-10, 10]]])
    assert got[0] == pytest.approx(math.erf(1) / 2, abs=1e-10)
    assert got[1] == pytest.approx(1, abs=1e-10)
    assert np.max(np.abs(model.cdf([-1.0, 0.0, 0.5], axis=1) - GROUND.cdf([-1.0, 0.0, 0.5]))) < 1e-10


def test_cell_density_uniform():
    g = Grid.line(0, 1, 64)
    model = CellDensity(g, np.ones(64))
    # cells are centred on grid points, so [0, dx/2) is owned by the last cell's image
    x = np.array([0.0, 0.25, 0.5, 0.99])
    assert np.allclose(model.cdf(x), x, atol=1e-14)
    assert model.box_masses([[[0.9, 1.0]]])[0] == pytest.approx(0.1, abs=1e-14)
    assert model.total() == pytest.approx(1.0)


def test_cell_density_rejections():
    g = Grid.line(0, 1, 16)
    with pytest.raises(ValueError, match="zero"):
        CellDensity(g, np.zeros(16))
    with pytest.raises(ValueError, match="nonnegative"):
        CellDensity(g, -np.ones(16))
    with pytest.raises(ValueError, match="shape"):
        CellDensity(g, np.ones(8))


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-16, 16), b=st.floats(-16, 16), c=st.floats(-16, 16))
def test_additivity_and_monotonicity(a, b, c):
    lo, mid, hi = sorted([a, b, c])
    g = Grid.line(-16, 16, 128)
    for model in (SpectralDensity.of(make_state(g, dict(GAUSS, center=1.0))),
                  CellDensity(g, np.exp(-np.abs(g.axis(0))))):
        m = model.box_masses([[[lo, mid]], [[mid, hi]], [[lo, hi]]])
        assert m[0] + m[1] == pytest.approx(m[2], abs=1e-12)
        assert m[2] >= max(m[0], m[1]) - 1e-12
