import json

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from otsynth.core import Dataset
from otsynth.evalmetrics import (METRICS, ProjectionSet, energy_distance, full_report, kde_divergence_1d,
                                 marginal_summary, mmd2_gaussian, projected_divergence,
                                 silverman_bandwidth, sliced_w1, wasserstein_1d)

from oracles import energy_brute, median_pooled_distance, mmd2_brute, w1_lp


def test_w1_simple_shift():
    assert wasserstein_1d([0.0, 1.0], [1.0, 2.0]) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("n", range(1, 7))
@pytest.mark.parametrize("m", range(1, 7))
def test_w1_matches_lp(n, m):
    rng = np.random.default_rng(10 * n + m)
    for trial in range(3):
        a = rng.normal(size=n)
        b = rng.normal(size=m) * 2
        if trial == 2:
            a, b = np.round(a), np.round(b)  # ties
        assert abs(wasserstein_1d(a, b) - w1_lp(a, b)) <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_energy_and_mmd_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 6, size=2)
    A, B = rng.normal(size=(n, 3)), rng.normal(size=(m, 3)) + 0.5
    assert abs(energy_distance(A, B) - energy_brute(A.tolist(), B.tolist())) <= 1e-12
    sigma = median_pooled_distance(A.tolist(), B.tolist())
    assert abs(mmd2_gaussian(A, B) - mmd2_brute(A.tolist(), B.tolist(), sigma)) <= 1e-12


def test_marginal_summary_quartiles():
    s = marginal_summary([1.0, 2.0, 3.0, 4.0])
    assert (s.mean, s.q1, s.q2, s.q3) == (2.5, 1.75, 2.5, 3.25)
    assert s.std_dev == pytest.approx(np.sqrt(5 / 3), abs=1e-15)


def test_silverman_bandwidth():
    a = np.arange(10.0)
    sd = np.std(a, ddof=1)
    iqr = np.quantile(a, 0.75) - np.quantile(a, 0.25)
    assert silverman_bandwidth(a) == pytest.approx(0.9 * min(sd, iqr / 1.34) * 10 ** -0.2, rel=1e-15)
    assert silverman_bandwidth([2.0, 2.0, 2.0]) > 0


def test_kl_of_shifted_gaussians():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 5000), rng.normal(1, 1, 5000)
    assert abs(kde_divergence_1d(a, b, "KL") - 0.5) <= 0.1


def test_divergence_kind_checked():
    with pytest.raises(ValueError, match="unknown divergence"):
        kde_divergence_1d([0.0, 1.0], [0.0, 1.0], "JS")


def test_sliced_w1_translation():
    # unnormalized directions: mean |v . shift| over the draws
    rng = np.random.default_rng(1)
    A = rng.normal(size=(50, 3))
    shift = np.array([1.0, 0.0, 0.0])
    proj = ProjectionSet.draw(3, 64, seed=4)
    assert sliced_w1(A, A + shift, proj) == pytest.approx(np.mean(np.abs(proj.directions @ shift)), rel=1e-12)
    unit = ProjectionSet.draw(3, 8, normalize=True)
    assert np.allclose(np.linalg.norm(unit.directions, axis=1), 1.0)
    with pytest.raises(ValueError, match="dimension"):
        sliced_w1(A, A[:, :2], proj)


def test_metrics_on_identical_samples():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(200, 3))
    rep = full_report(A, A.copy())
    for name in METRICS:
        v = rep.distances[name]
        if name.startswith(("TV", "Hellinger", "KL", "Proj")):
            assert v <= 0.02, name
        else:
            assert v <= 1e-9, name


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.just(3)), elements=st.floats(-50, 50)),
       arrays(np.float64, st.tuples(st.integers(2, 30), st.just(3)), elements=st.floats(-50, 50)))
# two point masses 1e-159 apart: the fallback bandwidth squared underflows
@example(np.zeros((2, 3)), np.full((2, 3), 1.51179471e-159))
def test_metric_ranges(A, B):
    rep = full_report(A, B, K=8)
    for name, v in rep.distances.items():
        assert np.isfinite(v) and v >= -1e-9, name
    for name in ("TV-Y", "Hellinger-Y", "ProjTV-Z", "ProjHellinger-Z"):
        assert rep.distances[name] <= 1 + 1e-9, name


def test_report_shapes_and_json():
    rng = np.random.default_rng(0)
    S, O = Dataset(rng.normal(size=(30, 3))), Dataset(rng.normal(size=(40, 3)))
    rep = full_report(S, O)
    assert set(rep.distances) == set(METRICS)
    doc = json.loads(rep.to_json())
    assert doc["oracle"]["mean"] == pytest.approx(O.y.mean())
    assert len(rep.flat()) == 20
    with pytest.raises(ValueError, match="dimension"):
        full_report(S, Dataset(np.ones((3, 2))))


def test_report_is_deterministic_in_seed():
    rng = np.random.default_rng(0)
    S, O = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    assert full_report(S, O, seed=2).to_dict() == full_report(S, O, seed=2).to_dict()


def test_projected_divergence_single_direction():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(100, 2)), rng.normal(size=(100, 2))
    proj = ProjectionSet(np.array([[1.0, 0.0]]))
    assert projected_divergence(A, B, proj, "TV") == pytest.approx(kde_divergence_1d(A[:, 0], B[:, 0], "TV"))


def test_mmd_degenerate_samples():
    assert mmd2_gaussian(np.zeros((3, 2)), np.zeros((2, 2))) == 0.0
    v = mmd2_gaussian(np.zeros((3, 2)), np.ones((1, 2)))
    assert v > 0
