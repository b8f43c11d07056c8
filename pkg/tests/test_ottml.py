import numpy as np
import pytest

from otsynth.core import Coupling, Dataset, OracleLeakError, Role
from otsynth.metricmodel import AffineMap, AlignmentKernelSpec
from otsynth.ottml import (OttmlConfig, OttmlResult, _Problem, coupling_gradient, fgw_loss, fit_ottml,
                           frank_wolfe_step, graph_loss, joint_objective, round_to_marginals, sinkhorn)

from oracles import central_fd, fgw_brute, graph_brute


def _instance(seed, n=5, m=4, p=3):
    rng = np.random.default_rng(seed)
    Z, Zp = rng.normal(size=(n, p)), rng.normal(size=(m, p)) * 1.4 - 0.5
    P = rng.random((n, m))
    P /= P.sum()
    model = AffineMap(np.eye(p) + 0.3 * rng.normal(size=(p, p)), rng.normal(size=p))
    return Z, Zp, P, model


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
def test_fgw_and_graph_losses_match_brute_force(seed, alpha):
    Z, Zp, P, model = _instance(seed)
    spec = AlignmentKernelSpec((0, 1), "rank")
    Psi = model(Zp)
    ref = fgw_brute(P.tolist(), Z.tolist(), Zp.tolist(), Psi.tolist(), alpha, stable=(0, 1))
    assert abs(fgw_loss(P, model, Z, Zp, spec, alpha) - ref) <= 1e-12
    assert abs(graph_loss(P, model, Z, Zp) - graph_brute(P.tolist(), Z.tolist(), Psi.tolist())) <= 1e-12
    tot = joint_objective(P, model, Z, Zp, spec, alpha, 2.0)
    assert tot == pytest.approx(ref + 2.0 * graph_brute(P, Z, Psi), abs=1e-12)


def test_fgw_loss_identical_spaces_and_diagonal_plan_is_zero():
    Z = np.random.default_rng(0).normal(size=(6, 3))
    P = np.eye(6) / 6
    assert fgw_loss(P, AffineMap.identity(3), Z, Z, AlignmentKernelSpec(), 0.5) == pytest.approx(0.0, abs=1e-15)


def test_fgw_loss_argument_checks():
    Z, Zp, P, model = _instance(0)
    with pytest.raises(ValueError, match="alpha"):
        fgw_loss(P, model, Z, Zp, AlignmentKernelSpec(), 1.5)
    with pytest.raises(ValueError, match="shape"):
        fgw_loss(P.T, model, Z, Zp, AlignmentKernelSpec(), 0.5)
    with pytest.raises(ValueError, match="dimension"):
        graph_loss(P, model, Z, Zp[:, :2])


def test_coupling_gradient_matches_finite_differences():
    Z, Zp, P, model = _instance(7)
    spec = AlignmentKernelSpec()
    G = coupling_gradient(P, model, Z, Zp, spec, 0.4, 1.5)
    f = lambda x: joint_objective(x.reshape(P.shape), model, Z, Zp, spec, 0.4, 1.5)
    fd = central_fd(f, P.ravel(), h=1e-7).reshape(P.shape)
    assert np.allclose(G, fd, rtol=1e-6, atol=1e-7)


def test_sinkhorn_marginals_and_small_epsilon_limit():
    rng = np.random.default_rng(2)
    C = rng.random((6, 6))
    p = q = np.full(6, 1 / 6)
    cp = sinkhorn(C, p, q, 0.1)
    assert cp.info["converged"] and cp.info["residual"] < 1e-9
    cp = sinkhorn(C, p, q, 1e-3, max_iters=5000)
    r, c = cp.marginal_residuals()
    assert max(r, c) <= 1e-12
    # small epsilon approaches the optimal assignment cost
    from scipy.optimize import linear_sum_assignment
    rows, cols = linear_sum_assignment(C)
    assert float(np.sum(C * cp.plan)) == pytest.approx(C[rows, cols].sum() / 6, abs=1e-2)


def test_sinkhorn_survives_tiny_epsilon_and_unequal_sizes():
    rng = np.random.default_rng(4)
    C = rng.random((5, 8)) * 100
    p, q = np.full(5, 0.2), np.full(8, 1 / 8)
    cp = sinkhorn(C, p, q, 1e-4, max_iters=3000)
    assert np.all(np.isfinite(cp.plan)) and cp.plan.min() >= 0
    assert max(cp.marginal_residuals()) <= 1e-12


def test_sinkhorn_rejects_bad_inputs():
    with pytest.raises(ValueError):
        sinkhorn(np.array([[np.inf]]), [1.0], [1.0], 0.1)
    with pytest.raises(ValueError):
        sinkhorn(np.zeros((1, 1)), [1.0], [1.0], 0.0)


def test_round_to_marginals_is_exact():
    rng = np.random.default_rng(0)
    P = rng.random((4, 7))
    p, q = np.full(4, 0.25), np.full(7, 1 / 7)
    R = round_to_marginals(P, p, q)
    assert np.allclose(R.sum(axis=1), p, atol=1e-15) and np.allclose(R.sum(axis=0), q, atol=1e-15)
    assert R.min() >= 0


def test_frank_wolfe_step_ignores_row_and_column_offsets():
    # a gradient shifted by row/column constants is the same linear functional on the polytope
    rng = np.random.default_rng(3)
    Z, Zp = rng.normal(size=(7, 2)), rng.normal(size=(6, 2))
    prob = _Problem(Z, Zp, np.zeros((7, 6)), 1.0)
    P = np.outer(prob.p, prob.q)
    G = rng.random((7, 6))
    shifted = G + 40.0 + rng.normal(size=(7, 1)) + rng.normal(size=(1, 6))
    cfg = OttmlConfig()
    a = frank_wolfe_step(P, G, prob, G, None, 0.0, cfg)
    b = frank_wolfe_step(P, shifted, prob, shifted, None, 0.0, cfg)
    assert a[2] == b[2] == 1.0
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)


def test_fit_is_monotone_and_marginals_hold():
    rng = np.random.default_rng(11)
    Z = rng.normal(size=(30, 3))
    Zp = Z @ np.array([[1.2, 0.1, 0], [0, 0.9, 0.1], [0.1, 0, 1.1]]).T + 0.5
    cfg = OttmlConfig(warmup_outer=3, max_outer=8)
    res = fit_ottml(Z, Zp, config=cfg)
    tr, reg = np.array(res.objective_trace), res.diagnostics["alpha_per_outer"]
    for t in range(1, len(tr)):
        if reg[t] == reg[t - 1]:
            assert tr[t] <= tr[t - 1] + 1e-9
    assert res.diagnostics["max_iterate_marginal_residual"] <= 1e-6
    assert max(res.coupling.marginal_residuals()) <= 1e-12
    assert res.diagnostics["final_alpha"] == cfg.alpha_star


def test_fit_net_model_runs():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(15, 2))
    res = fit_ottml(Z, Z + 0.3, config=OttmlConfig(warmup_outer=2, max_outer=4), model="net")
    assert np.all(np.isfinite(res.objective_trace))


def test_fit_single_points():
    res = fit_ottml(np.zeros((1, 2)), np.ones((1, 2)), config=OttmlConfig(warmup_outer=1, max_outer=3))
    assert res.coupling.plan.shape == (1, 1) and res.coupling.plan[0, 0] == 1.0


def test_fit_rejects_oracle_and_mismatch():
    ok = Dataset(np.ones((3, 3)))
    with pytest.raises(OracleLeakError):
        fit_ottml(ok, ok.with_role(Role.TARGET_TREATMENT_ORACLE))
    with pytest.raises(ValueError, match="dimension"):
        fit_ottml(np.ones((3, 3)), np.ones((3, 4)))
    with pytest.raises(ValueError):
        OttmlConfig(alpha_star=1.0)


def test_result_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(6, 2))
    res = fit_ottml(Z, Z * 1.1, config=OttmlConfig(warmup_outer=1, max_outer=2))
    path = tmp_path / "r.json"
    res.save(path)
    back = OttmlResult.load(path)
    assert np.array_equal(back.coupling.plan, res.coupling.plan)
    assert np.array_equal(back.model(Z), res.model(Z))
    assert back.objective_trace == res.objective_trace
