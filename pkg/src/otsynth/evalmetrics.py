"""Two-sample comparison of a synthetic sample against the withheld oracle.

Outcome-only metrics act on the last column; joint metrics act on full rows.
Density-based divergences use Gaussian KDEs with the Silverman rule of thumb
``0.9 * min(sd, IQR / 1.34) * n^(-1/5)`` evaluated on a shared 512-point grid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.stats import wasserstein_distance

from .core import Dataset

METRICS = ("W1-Y", "TV-Y", "Hellinger-Y", "KL-Y", "Energy-Z", "SlicedW1-Z",
           "ProjTV-Z", "ProjHellinger-Z", "ProjKL-Z", "MMD2-Z")
GRID_POINTS = 512
KL_FLOOR = 1e-12


def _vec(a) -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        raise ValueError("empty sample")
    if not np.all(np.isfinite(a)):
        raise ValueError("sample contains non-finite values")
    return a


def _rows(A) -> np.ndarray:
    A = A.values if isinstance(A, Dataset) else np.asarray(A, dtype=float)
    A = np.atleast_2d(A)
    if A.shape[0] == 0:
        raise ValueError("empty sample")
    return A


@dataclass(frozen=True)
class MarginalSummary:
    mean: float
    std_dev: float
    q1: float
    q2: float
    q3: float


def marginal_summary(values) -> MarginalSummary:
    """Mean, sample sd (ddof 1) and quartiles by linear interpolation of order statistics."""
    v = _vec(values)
    q1, q2, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return MarginalSummary(float(v.mean()), sd, float(q1), float(q2), float(q3))


def wasserstein_1d(a, b) -> float:
    return float(wasserstein_distance(_vec(a), _vec(b)))


def silverman_bandwidth(a) -> float:
    a = _vec(a)
    sd = np.std(a, ddof=1) if a.size > 1 else 0.0
    q75, q25 = np.quantile(a, [0.75, 0.25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = max(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        # a constant sample still needs a finite kernel
        spread = 1e-3 * max(1.0, abs(float(a.mean())))
    return float(0.9 * spread * a.size ** (-0.2))


def _kde(sample, h, grid):
    u = (grid[:, None] - sample[None, :]) / h
    with np.errstate(over="ignore"):
        # far-away grid points overflow u*u to inf, and exp(-inf) is the intended 0
        return np.exp(-0.5 * u * u).sum(axis=1) / (sample.size * h * np.sqrt(2.0 * np.pi))


def _normalize(p, grid):
    mass = np.trapezoid(p, grid)
    return p / mass if mass > 0 else np.full_like(p, 1.0 / (grid[-1] - grid[0]))


def kde_divergence_1d(a, b, kind: str) -> float:
    """TV, Hellinger or KL between KDEs of ``a`` (reference) and ``b``.

    Bandwidths are floored at the grid step of the pooled data span so that a
    near-constant sample cannot fall between grid points, and each density is
    renormalized to unit trapezoid mass on the grid.
    """
    if kind not in ("TV", "Hellinger", "KL"):
        raise ValueError(f"unknown divergence kind {kind!r}")
    a, b = _vec(a), _vec(b)
    step = (max(a.max(), b.max()) - min(a.min(), b.min())) / (GRID_POINTS - 1)
    ha, hb = max(silverman_bandwidth(a), step), max(silverman_bandwidth(b), step)
    h = max(ha, hb)
    lo = min(a.min(), b.min()) - 3.0 * h
    hi = max(a.max(), b.max()) + 3.0 * h
    grid = np.linspace(lo, hi, GRID_POINTS)
    p, q = _normalize(_kde(a, ha, grid), grid), _normalize(_kde(b, hb, grid), grid)
    if kind == "TV":
        return float(min(0.5 * np.trapezoid(np.abs(p - q), grid), 1.0))
    if kind == "Hellinger":
        bc = np.trapezoid(np.sqrt(p * q), grid)
        return float(np.sqrt(min(max(1.0 - bc, 0.0), 1.0)))
    pf = _normalize(np.maximum(p, KL_FLOOR), grid)
    qf = _normalize(np.maximum(q, KL_FLOOR), grid)
    return float(max(np.trapezoid(pf * np.log(pf / qf), grid), 0.0))


def energy_distance(A, B) -> float:
    """V-statistic ``2 E|a-b| - E|a-a'| - E|b-b'|``."""
    A, B = _rows(A), _rows(B)
    return float(2.0 * cdist(A, B).mean() - cdist(A, A).mean() - cdist(B, B).mean())


@dataclass(frozen=True)
class ProjectionSet:
    directions: np.ndarray
    seed: int = 0

    @classmethod
    def draw(cls, dim: int, K: int = 128, seed: int = 0, normalize: bool = False) -> "ProjectionSet":
        V = np.random.default_rng(seed).standard_normal((K, dim))
        if normalize:
            V /= np.linalg.norm(V, axis=1, keepdims=True)
        return cls(V, seed)


def _projections(A, B, projections: ProjectionSet):
    A, B = _rows(A), _rows(B)
    V = np.atleast_2d(projections.directions)
    if not A.shape[1] == B.shape[1] == V.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]}, {B.shape[1]}, directions {V.shape[1]}")
    return A @ V.T, B @ V.T


def sliced_w1(A, B, projections: ProjectionSet) -> float:
    PA, PB = _projections(A, B, projections)
    return float(np.mean([wasserstein_1d(PA[:, k], PB[:, k]) for k in range(PA.shape[1])]))


def projected_divergence(A, B, projections: ProjectionSet, kind: str) -> float:
    PA, PB = _projections(A, B, projections)
    return float(np.mean([kde_divergence_1d(PA[:, k], PB[:, k], kind) for k in range(PA.shape[1])]))


def mmd2_gaussian(A, B) -> float:
    """V-statistic MMD^2 with a Gaussian kernel at the pooled median distance."""
    A, B = _rows(A), _rows(B)
    pooled = np.vstack([A, B])
    if pooled.shape[0] < 2:
        raise ValueError("median heuristic needs at least two pooled points")
    sigma = float(np.median(pdist(pooled)))
    if sigma == 0.0:
        # every pooled point coincides with at least half the others; both samples sit at one location
        sigma = float(np.max(pdist(pooled)))
        if sigma == 0.0:
            return 0.0
    # scale distances before squaring so a tiny sigma cannot underflow to zero
    def k(X, Y):
        return np.exp(-0.5 * (cdist(X, Y) / sigma) ** 2).mean()

    return float(k(A, A) + k(B, B) - 2.0 * k(A, B))


@dataclass
class EvalReport:
    synthetic: MarginalSummary
    oracle: MarginalSummary
    distances: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"synthetic": asdict(self.synthetic), "oracle": asdict(self.oracle),
                "distances": dict(self.distances)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def flat(self) -> dict:
        """Marginal summaries and distances as one name -> value map."""
        out = {}
        for who, summ in (("synthetic", self.synthetic), ("oracle", self.oracle)):
            for k, v in asdict(summ).items():
                out[f"{who}-{k}"] = v
        out.update(self.distances)
        return out


def full_report(synthetic, oracle, seed: int = 0, K: int = 128) -> EvalReport:
    """Every metric comparing ``synthetic`` against the ``oracle`` sample."""
    S, O = _rows(synthetic), _rows(oracle)
    if S.shape[1] != O.shape[1]:
        raise ValueError(f"dimension mismatch: {S.shape[1]} vs {O.shape[1]}")
    ys, yo = S[:, -1], O[:, -1]
    proj = ProjectionSet.draw(S.shape[1], K, seed)
    dist = {
        "W1-Y": wasserstein_1d(ys, yo),
        "TV-Y": kde_divergence_1d(yo, ys, "TV"),
        "Hellinger-Y": kde_divergence_1d(yo, ys, "Hellinger"),
        "KL-Y": kde_divergence_1d(yo, ys, "KL"),
        "Energy-Z": energy_distance(S, O),
        "SlicedW1-Z": sliced_w1(S, O, proj),
        "ProjTV-Z": projected_divergence(O, S, proj, "TV"),
        "ProjHellinger-Z": projected_divergence(O, S, proj, "Hellinger"),
        "ProjKL-Z": projected_divergence(O, S, proj, "KL"),
        "MMD2-Z": mmd2_gaussian(S, O),
    }
    return EvalReport(marginal_summary(ys), marginal_summary(yo), dist)
