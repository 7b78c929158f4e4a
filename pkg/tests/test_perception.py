import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bohmlab.ensemble import InitialDensity, evolve_ensemble, sample_initial
from bohmlab.perception import (GCBM, SBM, SCBM, SQM, FamilyError, Perception, PerceptionSet, Region,
                                build_perception_family, check_partition, load_perceptions,
                                save_perceptions, sbm_measure_density, scbm_measure_density, set_measure,
                                sqm_measure_density)
from bohmlab.pilotwave import Trajectory, integrate_trajectory
from conftest import free_width

GROUND = stats.norm(scale=math.sqrt(0.5))


def static(x, t1=10.0):
    return Trajectory(np.array([0.0, t1]), np.array([[x], [x]]))


@pytest.fixture(scope="module")
def quantum_ensemble(free_source):
    pts = sample_initial(InitialDensity.quantum(free_source.at(0.0)), 10_000, seed=21)
    return evolve_ensemble(pts, 0.0, 2.0, free_source, rk_dt=0.05, output_dt=0.1, seed=21)


# -- regions -------------------------------------------------------------------------


def test_region_canonical_form():
    r = Region([[0, 1], [0.5, 2], [3, 4]])
    assert r.to_list() == [[0.0, 2.0], [3.0, 4.0]]
    assert r.size == 3.0
    assert r.contains([[0.0], [2.0], [3.5]]).tolist() == [True, False, True]
    with pytest.raises(ValueError):
        Region([[1, 1]])
    with pytest.raises(ValueError):
        Region([])


def test_rectangles_union():
    r = Region([[[0, 2], [0, 1]], [[1, 3], [0, 1]], [[0, 1], [1, 2]]])
    assert r.size == pytest.approx(4.0)
    assert r.contains([[2.5, 0.5], [0.5, 1.5], [1.5, 1.5]]).tolist() == [True, True, False]
    assert Region.rectangle([0, 1], [0, 1]).subset_of(r)
    assert not Region.rectangle([1, 2], [1, 2]).subset_of(r)


def test_subset_across_pieces():
    big = Region([[0, 1], [1, 2]])  # merges to [0, 2)
    assert Region.interval(0.5, 1.5).subset_of(big)
    assert Region.interval(0, 1).overlaps(Region.interval(0.5, 3))
    assert not Region.interval(0, 1).overlaps(Region.interval(1, 3))


# -- SQM ------------------------------------------------------------------------------


def test_sqm_examples(ground_source):
    whole = Perception("all", 0.0, Region.interval(-16, 16))
    assert abs(sqm_measure_density(whole, ground_source) - 1) < 1e-10
    half = Perception("left", 3.0, Region.interval(-16, 0))
    assert abs(sqm_measure_density(half, ground_source) - 0.5) < 1e-8
    unit = Perception("unit", 0.0, Region.interval(-1, 1))
    assert abs(sqm_measure_density(unit, ground_source) - math.erf(1)) < 1e-6


def test_sqm_time_range_and_geometry_errors(ground_source):
    with pytest.raises(ValueError, match="outside evolved range"):
        sqm_measure_density(Perception("late", 11.0, Region.interval(0, 1)), ground_source)
    with pytest.raises(ValueError, match="leaves the grid"):
        sqm_measure_density(Perception("wide", 0.0, Region.interval(0, 20)), ground_source)
    with pytest.raises(ValueError, match="dims"):
        sqm_measure_density(Perception("flat", 0.0, Region.rectangle([0, 1], [0, 1])), ground_source)


# -- SBM ---------------------------------------------------------------------------------


def test_sbm_examples(free_source):
    assert sbm_measure_density(Perception("a", 5.0, Region.interval(-1, 1)), static(0.0)) == 1.0
    assert sbm_measure_density(Perception("b", 5.0, Region.interval(2, 3)), static(0.0)) == 0.0
    tr = integrate_trajectory([1.0], 0.0, 2.0, free_source, rk_dt=0.05, output_dt=0.1)
    x2 = float(free_width(2.0))
    p = Perception("c", 2.0, Region.interval(x2 - 0.01, x2 + 0.01))
    assert sbm_measure_density(p, tr) == 1.0
    with pytest.raises(ValueError, match="outside trajectory range"):
        sbm_measure_density(Perception("d", 3.0, Region.interval(0, 1)), tr)


# -- SCBM ---------------------------------------------------------------------------------


def test_scbm_examples(quantum_ensemble, free_source):
    m, se = scbm_measure_density(Perception("all", 1.0, Region.interval(-16, 16)), quantum_ensemble)
    assert (m, se) == (1.0, 0.0)
    for lo, hi, t in [(-1, 1, 2.0), (0.3, 2.5, 1.0), (-4, -1.5, 0.5)]:
        p = Perception("r", t, Region.interval(lo, hi))
        m, se = scbm_measure_density(p, quantum_ensemble)
        assert abs(m - sqm_measure_density(p, free_source)) < 3 * se
    one = quantum_ensemble.subset([0])
    assert scbm_measure_density(Perception("r", 1.0, Region.interval(-1, 1)), one)[0] in (0.0, 1.0)
    assert GCBM(quantum_ensemble).tag == "GCBM"


# -- set measure --------------------------------------------------------------------------


def test_set_measure(ground_source):
    sqm = SQM(ground_source)
    assert set_measure(PerceptionSet(), sqm) == 0.0
    a = Perception("a", 0.0, Region.interval(-1, 0))
    b = Perception("b", 0.0, Region.interval(0.5, 2))
    assert set_measure(PerceptionSet((a,)), sqm) == sqm.density(a)
    both = set_measure(PerceptionSet((a, b)), sqm)
    assert both == math.fsum([sqm.density(a), sqm.density(b)])


def test_duplicate_ids_rejected():
    p = Perception("x", 0.0, Region.interval(0, 1))
    with pytest.raises(ValueError, match="duplicate"):
        PerceptionSet((p, p))
    with pytest.raises(ValueError):
        Perception("y", 0.0, Region.interval(0, 1), prior_weight=0.0)


# -- families -----------------------------------------------------------------------------


def test_four_cells_partition(ground_source):
    S = build_perception_family({"times": [0.0], "cells": 4}, ground_source.grid)
    assert len(S) == 4
    assert abs(sum(SQM(ground_source).densities(S)) - 1) < 1e-9


def test_whole_domain_cell(ground_source):
    S = build_perception_family({"times": [0.0], "cells": 1}, ground_source.grid)
    assert len(S) == 1 and SQM(ground_source).density(S[0]) == pytest.approx(1, abs=1e-10)


def test_64_cells_match_gaussian_oracle(ground_source):
    S = build_perception_family({"times": [0.0], "cells": 64}, ground_source.grid)
    got = SQM(ground_source).densities(S)
    edges = np.array([p.region.boxes[0, 0] for p in S])
    want = GROUND.cdf(edges[:, 1]) - GROUND.cdf(edges[:, 0])
    assert np.max(np.abs(got - want)) < 1e-6


def test_family_options(line512):
    S = build_perception_family({"times": [0.0, 1.0], "cells": [[-16, -1, 0, 2, 16]],
                                 "weights": [1, 2, 3, 4], "id_format": "p{ti}-{ci}"}, line512)
    assert S.ids[:2] == ["p0-0", "p0-1"] and len(S) == 8
    assert S["p1-3"].prior_weight == 4.0 and S["p1-3"].t == 1.0
    bounded = build_perception_family({"times": [0.0], "cells": 4, "bounds": [[-2, 2]]}, line512)
    assert bounded[0].region.to_list() == [[-2.0, -1.0]]
    two = build_perception_family({"times": [0.0], "cells": [2, 3]},
                                  type(line512).square(-4, 4, 32))
    assert len(two) == 6 and two[0].region.dims == 2


def test_overlapping_cells_rejected_by_name(line512):
    with pytest.raises(FamilyError, match="overlapping cells: cell 1"):
        build_perception_family({"times": [0.0], "cells": [[-16, 0, -1, 16]]}, line512)
    with pytest.raises(FamilyError, match="'0' and '1' overlap"):
        build_perception_family({"times": [0.0], "intervals": [[-16, 1], [0, 16]]}, line512)
    with pytest.raises(FamilyError, match="cover"):
        build_perception_family({"times": [0.0], "intervals": [[-16, 0], [1, 16]]}, line512)
    assert check_partition([("a", Region.interval(0, 1)), ("b", Region.interval(1, 2))]) == []


def test_perceptions_yaml_round_trip(tmp_path, line512):
    S = build_perception_family({"times": [0.25], "cells": 3, "weights": [0.5, 1, 2]}, line512)
    save_perceptions(S, tmp_path / "s.yaml")
    back = load_perceptions(tmp_path / "s.yaml")
    assert back.ids == S.ids and np.array_equal(back.weights, S.weights)
    for a, b in zip(S, back):
        assert a.t == b.t and np.array_equal(a.region.boxes, b.region.boxes)


# -- properties -----------------------------------------------------------------------------


intervals = st.tuples(st.floats(-15, 15), st.floats(0.01, 10))


@settings(max_examples=30, deadline=None)
@given(a=intervals, grow=st.tuples(st.floats(0, 3), st.floats(0, 3)), t=st.sampled_from([0.0, 0.5, 1.0, 2.0]),
       member=st.integers(0, 99))
def test_range_and_monotonicity(free_source, quantum_ensemble, a, grow, t, member):
    lo, width = a
    hi = min(lo + width, 16.0)
    inner = Region.interval(lo, hi)
    outer = Region.interval(max(lo - grow[0], -16.0), min(hi + grow[1], 16.0))
    assert inner.subset_of(outer)
    pa, pb = Perception("a", t, inner), Perception("b", t, outer)
    sqm, sbm = SQM(free_source), SBM(quantum_ensemble.trajectory(member), free_source.grid)
    scbm = SCBM(quantum_ensemble, free_source.grid)
    assert 0 <= sqm.density(pa) <= sqm.density(pb) + 1e-15 <= 1 + 1e-15
    assert sbm.density(pa) in (0.0, 1.0) and sbm.density(pa) <= sbm.density(pb)
    assert 0 <= scbm.density(pa) <= scbm.density(pb) <= 1


@pytest.mark.parametrize("cells", [8, 64, [[-16, -3, -0.5, 0.25, 16]]], ids=["8", "64", "edges"])
def test_partition_of_unity(free_source, quantum_ensemble, cells):
    for t in (0.0, 1.0, 2.0):
        S = build_perception_family({"times": [t], "cells": cells}, free_source.grid)
        assert abs(math.fsum(SQM(free_source).densities(S)) - 1) < 1e-9
        for k in range(5):
            assert SBM(quantum_ensemble.trajectory(k), free_source.grid).densities(S).sum() == 1.0


def test_support_inclusion(free_source, quantum_ensemble):
    S = build_perception_family({"times": [0.5, 1.0, 2.0], "cells": 256}, free_source.grid)
    sqm = SQM(free_source).densities(S)
    for k in range(0, 10_000, 97):
        sbm = SBM(quantum_ensemble.trajectory(k), free_source.grid).densities(S)
        assert np.all(sqm[sbm == 1] > 0)


def test_scbm_convergence_over_seeds(free_source):
    S = build_perception_family({"times": [2.0], "cells": 16}, free_source.grid)
    sqm = SQM(free_source).densities(S)
    hits = []
    for seed in range(20):
        pts = sample_initial(InitialDensity.quantum(free_source.at(0.0)), 2000, seed=100 + seed)
        ens = evolve_ensemble(pts, 0.0, 2.0, free_source, rk_dt=0.05, output_dt=0.5)
        scbm = SCBM(ens, free_source.grid)
        m = scbm.densities(S)
        se = np.sqrt(sqm * (1 - sqm) / ens.n)
        hits.extend((np.abs(m - sqm) < 3 * se) | (np.abs(m - sqm) == 0))
    assert np.mean(hits) >= 0.95
