import numpy as np
import pytest

from otsynth.core import Coupling, Dataset, OracleLeakError, Role
from otsynth.metricmodel import AffineMap, ResidualNet
from otsynth.ottml import OttmlResult
from otsynth.synth import (SynthConfig, generate_dataset, generate_point, synth_gradient, synth_loss,
                           write_diagnostics)

from oracles import central_fd, synth_brute


def _result(P, model):
    n, m = P.shape
    return OttmlResult(Coupling(P, np.full(n, 1 / n), np.full(m, 1 / m)), model, [0.0], True)


def _instance(seed, n=5, m=4, p=3, net=False):
    rng = np.random.default_rng(seed)
    Z, Zp = rng.normal(size=(n, p)), rng.normal(size=(m, p)) + 0.5
    P = rng.random((n, m))
    P /= P.sum()
    if net:
        model = ResidualNet.init(p, seed, Zp)
        model = model.with_params(model.params() + 0.1 * rng.normal(size=model.n_params))
    else:
        model = AffineMap(np.eye(p) + 0.3 * rng.normal(size=(p, p)), rng.normal(size=p))
    return Z, Zp, P, model, rng.normal(size=p), rng.normal(size=p)


@pytest.mark.parametrize("seed", range(6))
def test_synth_loss_matches_brute_force(seed):
    Z, Zp, P, model, z1, zc = _instance(seed, net=seed % 2 == 1)
    res = _result(P, model)
    ref = synth_brute(model(zc).tolist(), z1.tolist(), P.tolist(), Z.tolist(), model(Zp).tolist(), 0.8)
    assert abs(synth_loss(zc, z1, res, Z, Zp, 0.8) - ref) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_synth_gradient_matches_finite_differences(seed):
    Z, Zp, P, model, z1, zc = _instance(seed, n=8, m=8, net=seed % 2 == 1)
    res = _result(P, model)
    val, g = synth_gradient(zc, z1, res, Z, Zp, 0.8)
    assert val == pytest.approx(synth_loss(zc, z1, res, Z, Zp, 0.8), abs=1e-12)
    fd = central_fd(lambda x: synth_loss(x, z1, res, Z, Zp, 0.8), zc)
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_identity_problem_recovers_source_point():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(12, 2))
    res = _result(np.eye(12) / 12, AffineMap.identity(2))
    z = generate_point(Z[3], res, Z, Z)
    assert np.allclose(z, Z[3], atol=1e-12)


def test_generation_never_worse_than_scan():
    Z, Zp, P, model, z1, _ = _instance(3, n=10, m=9)
    res = _result(P, model)
    z = generate_point(z1, res, Z, Zp)
    best_control = min(synth_loss(zp, z1, res, Z, Zp, 1.0) for zp in Zp)
    assert synth_loss(z, z1, res, Z, Zp, 1.0) <= best_control + 1e-12
    # refinement off gives exactly a scanned candidate
    z0 = generate_point(z1, res, Z, Zp, SynthConfig(refine_steps=0))
    assert synth_loss(z0, z1, res, Z, Zp, 1.0) <= best_control + 1e-12


def test_generate_dataset_order_role_and_diagnostics(tmp_path):
    Z, Zp, P, model, _, _ = _instance(1, n=6, m=5)
    res = _result(P, model)
    Z1 = np.random.default_rng(9).normal(size=(4, 3))
    out, diags = generate_dataset(Z1, res, Z, Zp, SynthConfig(refine_steps=20), return_diagnostics=True)
    assert out.role is Role.SYNTHETIC and out.n == 4
    assert [d["index"] for d in diags] == [0, 1, 2, 3]
    for j in range(4):
        assert np.allclose(out.values[j], generate_point(Z1[j], res, Z, Zp, SynthConfig(refine_steps=20)))
    write_diagnostics(diags, tmp_path / "d.json")
    assert (tmp_path / "d.json").stat().st_size > 0


def test_ill_conditioned_map_skips_forward_image():
    Z, Zp, P, _, z1, _ = _instance(2)
    A = np.diag([1.0, 1.0, 1e-14])
    res = _result(P, AffineMap(A, np.zeros(3)))
    _, diags = generate_dataset(z1[None, :], res, Z, Zp, SynthConfig(refine_steps=5), return_diagnostics=True)
    assert "forward_image_skipped" in diags[0]


def test_synth_input_checks():
    Z, Zp, P, model, z1, zc = _instance(0)
    res = _result(P, model)
    with pytest.raises(ValueError):
        synth_loss(zc[:2], z1, res, Z, Zp, 1.0)
    with pytest.raises(ValueError, match="dimension"):
        generate_dataset(np.ones((2, 2)), res, Z, Zp)
    with pytest.raises(ValueError):
        SynthConfig(lambda_s=-1.0)
    with pytest.raises(OracleLeakError):
        generate_dataset(Dataset(np.ones((1, 3)), Role.TARGET_TREATMENT_ORACLE), res, Z, Zp)
