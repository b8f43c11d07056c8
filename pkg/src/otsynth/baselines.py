"""Comparison methods that produce a synthetic target-treatment sample.

* ``twfe_synth``: pooled two-way fixed-effects regression with treatment and
  site interactions, predicted at the target-control covariates.
* ``matchsynth``: nearest source-treated neighbour of each target control,
  with a linear covariate adjustment.
* ``gensynth``: matched factor model in the spirit of generalized synthetic
  control.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .core import Dataset, Role, ensure_not_oracle

log = logging.getLogger(__name__)
RIDGE = 1e-8


def _lstsq(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least squares via an orthogonal decomposition; ridge fallback when rank deficient."""
    if np.linalg.matrix_rank(X) < X.shape[1]:
        coef = np.linalg.solve(X.T @ X + RIDGE * np.eye(X.shape[1]), X.T @ y)
        return coef, True
    Q, R = np.linalg.qr(X)
    return np.linalg.solve(R, Q.T @ y), False


def _nearest(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Index in ``B`` of each row of ``A``'s nearest neighbour (lowest index on ties)."""
    return np.argmin(cdist(A, B), axis=1)


@dataclass
class TwfeFit:
    alpha: float
    beta: np.ndarray
    tau: float
    gamma: np.ndarray
    nu: float
    lam: np.ndarray
    ridge: bool = False
    residuals: np.ndarray = field(default=None, repr=False)

    def predict_treated_target(self, X: np.ndarray) -> np.ndarray:
        return (self.alpha + self.tau + self.nu) + X @ (self.beta + self.gamma + self.lam)


def twfe_fit(Z0: Dataset, Z1: Dataset, Z0prime: Dataset) -> TwfeFit:
    ensure_not_oracle(Z0, Z1, Z0prime)
    X = np.vstack([Z0.X, Z1.X, Z0prime.X])
    y = np.concatenate([Z0.y, Z1.y, Z0prime.y])
    D = np.concatenate([np.zeros(Z0.n), np.ones(Z1.n), np.zeros(Z0prime.n)])[:, None]
    T = np.concatenate([np.zeros(Z0.n), np.zeros(Z1.n), np.ones(Z0prime.n)])[:, None]
    one = np.ones((X.shape[0], 1))
    design = np.hstack([one, X, D, D * X, T, T * X])
    coef, ridge = _lstsq(design, y)
    if ridge:
        log.warning("TWFE design is rank deficient; using ridge %g", RIDGE)
    d = X.shape[1]
    blocks = np.split(coef, [1, 1 + d, 2 + d, 2 + 2 * d, 3 + 2 * d])
    return TwfeFit(float(blocks[0][0]), blocks[1], float(blocks[2][0]), blocks[3],
                   float(blocks[4][0]), blocks[5], ridge, y - design @ coef)


def twfe_synth(Z0: Dataset, Z1: Dataset, Z0prime: Dataset) -> Dataset:
    fit = twfe_fit(Z0, Z1, Z0prime)
    Xp = Z0prime.X
    return Dataset(np.column_stack([Xp, fit.predict_treated_target(Xp)]), Role.SYNTHETIC)


def matchsynth(Z0, Z1: Dataset, Z0prime: Dataset, diagnostics: dict | None = None) -> Dataset:
    """``Z0`` is accepted for a uniform signature but not used."""
    ensure_not_oracle(Z0, Z1, Z0prime)
    Xp = Z0prime.X
    idx = _nearest(Xp, Z1.X)
    Xm, ym = Z1.X[idx], Z1.y[idx]
    design = np.column_stack([np.ones(len(idx)), Xm])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        beta = np.zeros(Xm.shape[1])
        if diagnostics is not None:
            diagnostics["adjustment_skipped"] = "matched covariates are degenerate"
    else:
        beta = np.linalg.lstsq(design, ym, rcond=None)[0][1:]
    y = ym + (Xp - Xm) @ beta
    return Dataset(np.column_stack([Xp, y]), Role.SYNTHETIC)


@dataclass
class GenSynthFit:
    alpha: float
    beta: np.ndarray
    Lambda0: np.ndarray
    Lambda1: np.ndarray
    f: np.ndarray
    fprime: np.ndarray
    tau: float
    sweeps: int
    converged: bool
    objective_trace: list = field(default_factory=list, repr=False)


def _factor_als(X, Xm, y, ym, r, tol=1e-8, max_sweeps=500):
    """Alternate (alpha, beta) regression with a rank-``r`` factor fit of the residual pair."""
    n = X.shape[0]
    design = np.vstack([np.column_stack([np.ones(n), X]), np.column_stack([np.ones(n), Xm])])
    target = np.concatenate([y, ym])
    coef, _ = _lstsq(design, target)
    scale = max(float(target @ target), 1e-300)
    F = np.zeros((2, r))
    Lam = np.zeros((n, r))
    trace = []
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        R = np.column_stack([y, ym]) - (design @ coef).reshape(2, n).T
        # best rank-r fit of the n x 2 residual; orthonormal F pins the rotation
        _, _, Vt = np.linalg.svd(R, full_matrices=False)
        F = Vt[:r].T
        Lam = R @ F
        fitted = (Lam @ F.T).T.ravel()
        coef, _ = _lstsq(design, target - fitted)
        obj = float(np.sum((target - fitted - design @ coef) ** 2))
        trace.append(obj)
        if obj <= tol ** 2 * scale or (sweeps > 1 and abs(trace[-2] - obj) <= tol * trace[-2]):
            converged = True
            break
    return coef, F, Lam, trace, sweeps, converged


def gensynth_fit(Z0: Dataset, Z1: Dataset, Z0prime: Dataset, r: int = 2) -> tuple[GenSynthFit, np.ndarray]:
    """Fit the matched factor model; also returns the target-control match of each treated row."""
    ensure_not_oracle(Z0, Z1, Z0prime)
    if r < 1:
        raise ValueError("factor count r must be >= 1")
    if r > 2:
        raise ValueError("the two-equation factor model supports at most r = 2")
    m0 = _nearest(Z0.X, Z0prime.X)
    m1 = _nearest(Z1.X, Z0prime.X)
    coef, F, Lam0, trace, sweeps, converged = _factor_als(
        Z0.X, Z0prime.X[m0], Z0.y, Z0prime.y[m0], r)
    if not converged:
        log.warning("GenSynth ALS stopped after %d sweeps without converging", sweeps)
    alpha, beta = float(coef[0]), coef[1:]
    # treated pairs: both equations share lambda_1i, tau enters the source one only
    a = Z1.y - alpha - Z1.X @ beta
    b = Z0prime.y[m1] - alpha - Z0prime.X[m1] @ beta
    Q = np.eye(2) - F @ F.T
    e1 = np.array([1.0, 0.0])
    denom = Z1.n * float(e1 @ Q @ e1)
    AB = np.column_stack([a, b])
    if denom > 1e-12:
        tau = float(np.sum(AB @ Q @ e1) / denom)
    else:
        # factors span the treated direction: tau is not separable from the loadings
        tau = float(np.mean(a - b))
    Lam1 = (AB - tau * e1) @ F
    fit = GenSynthFit(alpha, beta, Lam0, Lam1, F[0], F[1], tau, sweeps, converged, trace)
    return fit, m1


def gensynth(Z0: Dataset, Z1: Dataset, Z0prime: Dataset, r: int = 2) -> Dataset:
    fit, m1 = gensynth_fit(Z0, Z1, Z0prime, r)
    Xm = Z0prime.X[m1]
    # move each treated unit to the target site: covariates to its match, factor f -> f'
    y = Z1.y + (Xm - Z1.X) @ fit.beta + fit.Lambda1 @ (fit.fprime - fit.f)
    return Dataset(np.column_stack([Xm, y]), Role.SYNTHETIC)
