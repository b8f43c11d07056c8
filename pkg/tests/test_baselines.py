import numpy as np
import pytest

from otsynth.baselines import gensynth, gensynth_fit, matchsynth, twfe_fit, twfe_synth
from otsynth.core import Dataset, OracleLeakError, Role


def _arm(X, y, role=Role.SOURCE_CONTROL):
    return Dataset(np.column_stack([X, y]), role)


def _linear_world(seed=0, n=40, d=2):
    rng = np.random.default_rng(seed)
    coef = dict(alpha=1.0, beta=np.array([0.5, -1.0]), tau=4.0, gamma=np.array([0.2, 0.3]),
                nu=-2.0, lam=np.array([1.0, 0.0]))
    X0, X1, X0p = (rng.normal(size=(n, d)) for _ in range(3))
    y0 = coef["alpha"] + X0 @ coef["beta"]
    y1 = coef["alpha"] + coef["tau"] + X1 @ (coef["beta"] + coef["gamma"])
    y0p = coef["alpha"] + coef["nu"] + X0p @ (coef["beta"] + coef["lam"])
    return coef, _arm(X0, y0), _arm(X1, y1, Role.SOURCE_TREATMENT), _arm(X0p, y0p, Role.TARGET_CONTROL)


def test_twfe_recovers_noiseless_coefficients():
    coef, Z0, Z1, Z0p = _linear_world()
    fit = twfe_fit(Z0, Z1, Z0p)
    assert fit.alpha == pytest.approx(coef["alpha"], abs=1e-10)
    assert np.allclose(fit.beta, coef["beta"], atol=1e-10)
    assert fit.tau == pytest.approx(coef["tau"], abs=1e-10)
    assert np.allclose(fit.gamma, coef["gamma"], atol=1e-10)
    assert fit.nu == pytest.approx(coef["nu"], abs=1e-10)
    assert np.allclose(fit.lam, coef["lam"], atol=1e-10)
    assert not fit.ridge
    out = twfe_synth(Z0, Z1, Z0p)
    expect = 1.0 + 4.0 - 2.0 + Z0p.X @ (coef["beta"] + coef["gamma"] + coef["lam"])
    assert np.allclose(out.y, expect, atol=1e-9)
    assert np.array_equal(out.X, Z0p.X) and out.role is Role.SYNTHETIC


def test_twfe_matches_generic_least_squares():
    rng = np.random.default_rng(2)
    Z0, Z1, Z0p = (_arm(rng.normal(size=(30, 2)), rng.normal(size=30)) for _ in range(3))
    fit = twfe_fit(Z0, Z1, Z0p)
    X = np.vstack([Z0.X, Z1.X, Z0p.X])
    y = np.concatenate([Z0.y, Z1.y, Z0p.y])
    D = np.repeat([0.0, 1.0, 0.0], 30)[:, None]
    T = np.repeat([0.0, 0.0, 1.0], 30)[:, None]
    design = np.hstack([np.ones((90, 1)), X, D, D * X, T, T * X])
    ref = np.linalg.lstsq(design, y, rcond=None)[0]
    got = np.concatenate([[fit.alpha], fit.beta, [fit.tau], fit.gamma, [fit.nu], fit.lam])
    assert np.allclose(got, ref, atol=1e-10)


def test_twfe_rank_deficient_uses_ridge():
    X = np.ones((5, 2))
    Z = _arm(X, np.arange(5.0))
    fit = twfe_fit(Z, Z, Z)
    assert fit.ridge and np.all(np.isfinite(fit.beta))


def test_matchsynth_hand_example_and_ties():
    Z1 = _arm(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]), np.array([1.0, 5.0, 3.0]), Role.SOURCE_TREATMENT)
    Z0p = _arm(np.array([[1.0, 0.0], [0.1, 1.9]]), np.zeros(2), Role.TARGET_CONTROL)
    diag = {}
    out = matchsynth(None, Z1, Z0p, diag)
    # matched rows 0 (tie with 1, lowest index) and 2; adjustment slope fitted on the matched pairs
    Xm = Z1.X[[0, 2]]
    ym = Z1.y[[0, 2]]
    design = np.column_stack([np.ones(2), Xm])
    assert np.linalg.matrix_rank(design) < 3 and "adjustment_skipped" in diag
    assert np.allclose(out.y, ym)
    assert np.array_equal(out.X, Z0p.X)


def test_matchsynth_linear_adjustment_is_exact_for_linear_outcome():
    rng = np.random.default_rng(0)
    X1 = rng.normal(size=(50, 2))
    Z1 = _arm(X1, 2.0 + X1 @ [1.0, -0.5], Role.SOURCE_TREATMENT)
    Xp = rng.normal(size=(20, 2))
    out = matchsynth(None, Z1, _arm(Xp, np.zeros(20), Role.TARGET_CONTROL))
    assert np.allclose(out.y, 2.0 + Xp @ [1.0, -0.5], atol=1e-10)


def test_gensynth_shapes_and_determinism():
    rng = np.random.default_rng(4)
    Z0, Z1, Z0p = (_arm(rng.normal(size=(25, 2)), rng.normal(size=25)) for _ in range(3))
    a, b = gensynth(Z0, Z1, Z0p), gensynth(Z0, Z1, Z0p)
    assert a.equals(b) and a.n == Z1.n and a.role is Role.SYNTHETIC
    fit, _ = gensynth_fit(Z0, Z1, Z0p, r=1)
    tr = np.array(fit.objective_trace)
    assert fit.converged and np.all(np.diff(tr) <= 1e-9 * tr[:-1])
    # two factors fit the two-column residual exactly and stop at once
    fit2, _ = gensynth_fit(Z0, Z1, Z0p, r=2)
    assert fit2.Lambda1.shape == (25, 2) and fit2.converged and fit2.sweeps <= 2


def test_gensynth_transfers_a_site_level_shift():
    coef, Z0, Z1, _ = _linear_world(1)
    # target site differs only by a level shift of -1; homogeneous effect tau = 4
    Z1 = _arm(Z1.X, coef["alpha"] + coef["tau"] + Z1.X @ coef["beta"], Role.SOURCE_TREATMENT)
    Z0p = _arm(Z0.X, Z0.y - 1.0, Role.TARGET_CONTROL)
    fit, _ = gensynth_fit(Z0, Z1, Z0p, r=1)
    assert fit.converged and fit.tau == pytest.approx(coef["tau"], abs=1e-10)
    out = gensynth(Z0, Z1, Z0p, r=1)
    truth = coef["alpha"] - 1.0 + coef["tau"] + out.X @ coef["beta"]
    assert np.allclose(out.y, truth, atol=1e-9)


def test_gensynth_rejects_bad_rank_and_oracle():
    Z = _arm(np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        gensynth(Z, Z, Z, r=0)
    with pytest.raises(ValueError):
        gensynth(Z, Z, Z, r=3)
    with pytest.raises(OracleLeakError):
        twfe_synth(Z, Z, Z.with_role(Role.TARGET_TREATMENT_ORACLE))
