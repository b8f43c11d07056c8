"""Simulated two-site environments.

Outcomes follow ``y = alpha + x'beta + D (tau + x'gamma) + eps`` with
``x = (1, x_1, ..., x_d)``.  Target-site rows are produced by pushing fresh
source-site draws through ``T(z) = Omega psi(z) + b``, where ``psi`` is a
scenario-specific warp of the non-augmented ``(x, y)`` row.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Dataset, Role, save_dataset

HIGH_DIM_SCENARIOS = (6, 10, 11)
NONRCT_SCENARIOS = (5, 9, 11)
SCENARIO_NAMES = {
    1: "linear", 2: "smooth", 3: "strong-nonlinear", 4: "discontinuous", 5: "linear-nonrct",
    6: "linear-d30", 7: "radial", 8: "curvy", 9: "smooth-nonrct", 10: "smooth-d30",
    11: "linear-d30-nonrct",
}


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: int = 1
    d: int | None = None
    n0: int = 500
    n1: int = 250
    n0prime: int = 500
    n1prime: int = 250
    kappa: float = 3.0
    tau: float = 10.0
    seed: int = 0
    model_seed: int | None = None
    alpha: float = 0.0

    def __post_init__(self):
        sid = int(self.scenario_id)
        if sid not in SCENARIO_NAMES:
            raise ValueError(f"unknown scenario id {sid}")
        d = self.d
        if d is None:
            d = 30 if sid in HIGH_DIM_SCENARIOS else 2
        if sid in HIGH_DIM_SCENARIOS and d != 30:
            raise ValueError(f"scenario {sid} requires d=30")
        if d < 1:
            raise ValueError("d must be >= 1")
        for name in ("n0", "n1", "n0prime", "n1prime"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        object.__setattr__(self, "scenario_id", sid)
        object.__setattr__(self, "d", int(d))

    @property
    def effective_kappa(self) -> float:
        return self.kappa if self.scenario_id in NONRCT_SCENARIOS else 0.0


@dataclass(frozen=True)
class OutcomeModel:
    alpha: float
    beta: np.ndarray
    gamma: np.ndarray
    sigma_eps2: float = 1.5
    mu_x: float = 2.5
    sigma_x2: float = 1.5
    tau: float = 10.0


@dataclass(frozen=True)
class MixingMatrix:
    omega: np.ndarray
    offset: np.ndarray

    def apply(self, Z: np.ndarray) -> np.ndarray:
        """Rowwise ``Omega z + b``."""
        return np.asarray(Z, dtype=float) @ self.omega.T + self.offset


def build_mixing_matrix(d: int) -> MixingMatrix:
    if d < 1:
        raise ValueError("d must be >= 1")
    p = d + 1
    om = np.zeros((p, p))
    om[0, 0] = 1.0
    om[1, 0] = -2.0 / 3.0
    om[1, 1] = 1.0 - om[1, 0]
    for i in range(2, p):
        # rows beyond the second read -0.5, -0.3, -0.18, ... from the left
        om[i, :i] = -0.5 * 0.6 ** np.arange(i)
        om[i, i] = 1.0 - om[i, :i].sum()
    return MixingMatrix(om, np.full(p, 3.0))


def draw_outcome_model(d: int, rng, alpha: float = 0.0, tau: float = 10.0) -> OutcomeModel:
    beta = rng.uniform(-1.0, 1.0, size=d + 1)
    gamma = rng.uniform(-1.0, 1.0, size=d + 1)
    beta *= np.sqrt(2.0) / np.linalg.norm(beta)
    gamma *= np.sqrt(1.5) / np.linalg.norm(gamma)
    return OutcomeModel(alpha, beta, gamma, tau=tau)


def simulate_arm(model: OutcomeModel, n: int, treated: bool, kappa: float, rng,
                 role: Role | None = None) -> Dataset:
    d = model.beta.size - 1
    mean = model.mu_x + (kappa if treated else 0.0)
    X = rng.normal(mean, np.sqrt(model.sigma_x2), size=(n, d))
    eps = rng.normal(0.0, np.sqrt(model.sigma_eps2), size=n)
    Xa = np.column_stack([np.ones(n), X])
    y = model.alpha + Xa @ model.beta + eps
    if treated:
        y = y + model.tau + Xa @ model.gamma
    if role is None:
        role = Role.SOURCE_TREATMENT if treated else Role.SOURCE_CONTROL
    return Dataset(np.column_stack([X, y]), role)


# -- warps -----------------------------------------------------------------

_CURVY = dict(a1=0.35, a2=0.25, a3=0.20, b1=0.9, b2=1.4, c=0.6, d1=0.45, d2=0.25, e=0.15, f=1.1)


@dataclass(frozen=True)
class WarpStats:
    """Per-environment constants some warps need."""

    y_mean: float = 0.0
    y_sd: float = 1.0
    xnorm_q75: float = 0.0
    P: np.ndarray | None = None
    u: np.ndarray | None = None


def warp_stats(Z: np.ndarray, rng=None, d: int | None = None) -> WarpStats:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    x, y = Z[:, :-1], Z[:, -1]
    P = u = None
    if rng is not None:
        d = d or x.shape[1]
        P, _ = np.linalg.qr(rng.normal(size=(d, d)))
        u = rng.normal(size=d)
        u /= np.linalg.norm(u)
    return WarpStats(float(y.mean()), float(y.std(ddof=1)) if y.size > 1 else 0.0,
                     float(np.quantile(np.linalg.norm(x, axis=1), 0.75)), P, u)


def _smooth(x, y):
    x2 = x + 0.2 * np.tanh(np.roll(x, -1, axis=1))
    y2 = y + 0.15 * np.tanh(0.3 * np.sum(x ** 2, axis=1))
    return x2, y2


def scenario_warp(scenario_id: int, z, stats: WarpStats | None = None) -> np.ndarray:
    """Apply the scenario's pre-mixing warp to rows ``z = (x, y)``."""
    Z = np.asarray(z, dtype=float)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    x, y = Z[:, :-1].copy(), Z[:, -1].copy()
    d = x.shape[1]
    sid = int(scenario_id)
    if sid in (1, 5, 6, 11):
        pass
    elif sid in (2, 9, 10):
        x, y = _smooth(x, y)
    elif sid == 3:
        if stats is None:
            raise ValueError("scenario 3 needs warp statistics")
        half = (d - 1) / 2.0
        a = 0.15 * (np.arange(d) - half) / max(half, 1e-12)
        theta = 0.5 * np.pi * (1.0 + np.tanh((y - stats.y_mean) / (stats.y_sd + 1e-12)))
        R = 0.6 * stats.xnorm_q75 + 1e-12
        x = x * (1.0 + a)
        y = y + R * np.sin(theta)
    elif sid == 4:
        x = x + (x[:, [0]] > 2.5).astype(float)
    elif sid == 7:
        r = np.linalg.norm(x, axis=1)
        s = 1.0 + 0.32 * np.tanh(0.6 * r) + 0.05 * np.tanh(0.12 * r ** 2)
        x = x * s[:, None]
        y = y + 0.24 * r
    elif sid == 8:
        if stats is None or stats.P is None or stats.u is None:
            raise ValueError("scenario 8 needs the orthogonal matrix P and unit vector u")
        k = _CURVY
        r = np.linalg.norm(x, axis=1)
        x2 = (x + k["a1"] * np.sin(k["b1"] * x) + k["a2"] * np.sin(k["b2"] * x @ stats.P)
              + k["a3"] * (np.tanh(k["c"] * r) / (r + 1e-8))[:, None] * x)
        y = y + k["d1"] * np.tanh(k["e"] * r ** 2) + k["d2"] * np.sin(k["f"] * x @ stats.u)
        x = x2
    else:
        raise ValueError(f"unknown scenario id {scenario_id}")
    out = np.column_stack([x, y])
    return out[0] if single else out


# -- environments --------------------------------------------------------------


@dataclass(frozen=True)
class SiteMap:
    scenario_id: int
    mixing: MixingMatrix
    stats: WarpStats

    def __call__(self, Z) -> np.ndarray:
        return self.mixing.apply(scenario_warp(self.scenario_id, Z, self.stats))


@dataclass(frozen=True)
class Environment:
    spec: ScenarioSpec
    Z0: Dataset
    Z1: Dataset
    Z0prime: Dataset
    Z1prime_oracle: Dataset
    truth: SiteMap
    outcome: OutcomeModel = field(repr=False)

    def observed(self) -> tuple[Dataset, Dataset, Dataset]:
        return self.Z0, self.Z1, self.Z0prime

    def export(self, out_dir) -> dict:
        os.makedirs(out_dir, exist_ok=True)
        files = {"Z0": "source_control.csv", "Z1": "source_treatment.csv",
                 "Z0prime": "target_control.csv", "Z1prime_oracle": "target_treatment_oracle.csv"}
        for attr, name in files.items():
            save_dataset(getattr(self, attr), os.path.join(out_dir, name))
        manifest = {
            "spec": asdict(self.spec),
            "scenario_name": SCENARIO_NAMES[self.spec.scenario_id],
            "files": files,
            "outcome": {"alpha": self.outcome.alpha, "beta": self.outcome.beta.tolist(),
                        "gamma": self.outcome.gamma.tolist(), "tau": self.outcome.tau},
            "omega": self.truth.mixing.omega.tolist(),
            "offset": self.truth.mixing.offset.tolist(),
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)
        return manifest


def make_environment(spec: ScenarioSpec) -> Environment:
    """Draw an environment; model and site map come from ``model_seed``, samples from ``seed``."""
    mseed = spec.seed if spec.model_seed is None else spec.model_seed
    mrng = np.random.default_rng([mseed, spec.scenario_id, 0])
    outcome = draw_outcome_model(spec.d, mrng, alpha=spec.alpha, tau=spec.tau)
    # P, u for the curvy warp are part of the fixed site map
    Pu = warp_stats(np.zeros((1, spec.d + 1)), mrng, spec.d)
    rng = np.random.default_rng([spec.seed, spec.scenario_id, 1])
    kappa = spec.effective_kappa
    ctrl = simulate_arm(outcome, spec.n0 + spec.n0prime, False, kappa, rng).values
    trt = simulate_arm(outcome, spec.n1 + spec.n1prime, True, kappa, rng).values
    c_src, c_tgt = ctrl[: spec.n0], ctrl[spec.n0:]
    t_src, t_tgt = trt[: spec.n1], trt[spec.n1:]
    pooled = warp_stats(np.vstack([c_tgt, t_tgt]))
    stats = WarpStats(pooled.y_mean, pooled.y_sd, pooled.xnorm_q75, Pu.P, Pu.u)
    T = SiteMap(spec.scenario_id, build_mixing_matrix(spec.d), stats)
    return Environment(
        spec,
        Dataset(c_src, Role.SOURCE_CONTROL),
        Dataset(t_src, Role.SOURCE_TREATMENT),
        Dataset(T(c_tgt), Role.TARGET_CONTROL),
        Dataset(T(t_tgt), Role.TARGET_TREATMENT_ORACLE),
        T,
        outcome,
    )


def paired_environment(n: int = 100, d: int = 2, seed: int = 0, n1: int = 50) -> Environment:
    """Scenario-1 environment with exactly paired arms: ``Z0' = T(Z0)``, ``Z1' = T(Z1)``."""
    spec = ScenarioSpec(1, d=d, n0=n, n1=n1, n0prime=n, n1prime=n1, seed=seed)
    env = make_environment(spec)
    return Environment(
        spec, env.Z0, env.Z1,
        Dataset(env.truth(env.Z0.values), Role.TARGET_CONTROL),
        Dataset(env.truth(env.Z1.values), Role.TARGET_TREATMENT_ORACLE),
        env.truth, env.outcome,
    )
