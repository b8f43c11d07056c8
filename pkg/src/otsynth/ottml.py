"""Joint transport / metric learning between the two control arms.

The objective over a coupling ``P`` (``n x n'``) and the inverse map ``psi`` is

    (1 - alpha) <K, P> + alpha * sum_{ijkl} |D_ij - D'_kl| P_ik P_jl + lam * <C, P>

where ``D`` holds source distances, ``D'`` the pull-back distances of the
target controls and ``C[i, k] = |z_i - psi(z'_k)|``.  It is minimized by
alternating Frank-Wolfe steps on ``P`` (entropic linear oracle, exact line
search on the quadratic) with backtracked Adam steps on the parameters of
``psi``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._kernels import GWContractor
from .core import Coupling, Dataset, ensure_not_oracle, pairwise_distances, uniform_weights
from .metricmodel import (AffineMap, AlignmentKernelSpec, InverseMapModel, ResidualNet,
                          alignment_kernel_matrix, graph_cost_matrix, graph_point_gradient,
                          gw_point_gradient, model_from_dict)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OttmlConfig:
    alpha_star: float = 0.5
    lambda_graph: float = 1.0
    warmup_outer: int = 10
    max_outer: int = 200
    rel_tol: float = 1e-5
    fw_iters_per_outer: int = 5
    psi_steps_per_outer: int = 20
    psi_learning_rate: float = 1e-2
    sinkhorn_epsilon_factor: float = 0.05
    sinkhorn_max_iters: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha_star < 1.0:
            raise ValueError("alpha_star must lie in (0, 1)")
        if not self.lambda_graph > 0:
            raise ValueError("lambda_graph must be positive")
        for name in ("warmup_outer", "max_outer", "fw_iters_per_outer", "psi_steps_per_outer",
                     "sinkhorn_max_iters"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("rel_tol", "psi_learning_rate", "sinkhorn_epsilon_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class OttmlResult:
    coupling: Coupling
    model: InverseMapModel
    objective_trace: list
    converged: bool
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "plan": self.coupling.plan.tolist(),
            "row_marginal": self.coupling.row_marginal.tolist(),
            "col_marginal": self.coupling.col_marginal.tolist(),
            "model": self.model.to_dict(),
            "objective_trace": list(self.objective_trace),
            "converged": self.converged,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OttmlResult":
        cp = Coupling(np.array(doc["plan"]), doc["row_marginal"], doc["col_marginal"])
        return cls(cp, model_from_dict(doc["model"]), list(doc["objective_trace"]),
                   bool(doc["converged"]), dict(doc.get("diagnostics", {})))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "OttmlResult":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _plan(coupling) -> np.ndarray:
    return coupling.plan if isinstance(coupling, Coupling) else np.asarray(coupling, dtype=float)


def _arrays(Z0, Z0prime):
    ensure_not_oracle(Z0, Z0prime)
    Z = Z0.values if isinstance(Z0, Dataset) else np.atleast_2d(np.asarray(Z0, dtype=float))
    Zp = Z0prime.values if isinstance(Z0prime, Dataset) else np.atleast_2d(np.asarray(Z0prime, dtype=float))
    if Z.shape[1] != Zp.shape[1]:
        raise ValueError(f"dimension mismatch: source {Z.shape[1]} vs target {Zp.shape[1]}")
    return Z, Zp


def _check_plan(P, n, m):
    if P.shape != (n, m):
        raise ValueError(f"coupling shape {P.shape} does not match data ({n}, {m})")


# -- objective pieces --------------------------------------------------------


def fgw_loss(coupling, model: InverseMapModel, Z0, Z0prime, kernel: AlignmentKernelSpec,
             alpha: float) -> float:
    """Fused alignment + structural loss of a coupling under ``psi``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    Z, Zp = _arrays(Z0, Z0prime)
    P = _plan(coupling)
    _check_plan(P, Z.shape[0], Zp.shape[0])
    K = alignment_kernel_matrix(kernel, Z, Zp)
    val = (1.0 - alpha) * float(np.sum(K * P))
    if alpha > 0:
        g = GWContractor(pairwise_distances(Z))
        g.set_target(pairwise_distances(model(Zp)))
        val += alpha * float(np.sum(P * g.contract(P)))
    return val


def graph_loss(coupling, model: InverseMapModel, Z0, Z0prime) -> float:
    Z, Zp = _arrays(Z0, Z0prime)
    P = _plan(coupling)
    _check_plan(P, Z.shape[0], Zp.shape[0])
    return float(np.sum(graph_cost_matrix(model, Z, Zp) * P))


def joint_objective(coupling, model, Z0, Z0prime, kernel, alpha, lambda_graph) -> float:
    return (fgw_loss(coupling, model, Z0, Z0prime, kernel, alpha)
            + lambda_graph * graph_loss(coupling, model, Z0, Z0prime))


def coupling_gradient(coupling, model, Z0, Z0prime, kernel, alpha, lambda_graph) -> np.ndarray:
    """Gradient of the joint objective with respect to the plan entries."""
    Z, Zp = _arrays(Z0, Z0prime)
    P = _plan(coupling)
    _check_plan(P, Z.shape[0], Zp.shape[0])
    G = (1.0 - alpha) * alignment_kernel_matrix(kernel, Z, Zp) + lambda_graph * graph_cost_matrix(model, Z, Zp)
    if alpha > 0:
        g = GWContractor(pairwise_distances(Z))
        g.set_target(pairwise_distances(model(Zp)))
        G = G + 2.0 * alpha * g.contract(P)
    return G


# -- entropic oracle -----------------------------------------------------------


def round_to_marginals(P: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Rank-one correction onto the exact transport polytope."""
    P = P * np.minimum(p / np.maximum(P.sum(axis=1), 1e-300), 1.0)[:, None]
    P = P * np.minimum(q / np.maximum(P.sum(axis=0), 1e-300), 1.0)[None, :]
    er = p - P.sum(axis=1)
    ec = q - P.sum(axis=0)
    s = er.sum()
    if s > 0:
        P = P + np.outer(er, ec) / s
    return P


def sinkhorn(cost, p, pprime, epsilon: float, max_iters: int = 1000, tol: float = 1e-9) -> Coupling:
    """Entropic OT plan via stabilized scaling with log-potential absorption.

    If the scaled kernel underflows the iteration continues with log-domain
    (log-sum-exp) updates from the absorbed potentials.
    The returned plan is rounded onto the exact marginals; ``info`` records
    the iteration count, the pre-rounding residual and whether the scaling
    loop reached ``tol``.
    """
    C = np.asarray(cost, dtype=float)
    p = np.asarray(p, dtype=float)
    q = np.asarray(pprime, dtype=float)
    if not np.all(np.isfinite(C)):
        raise ValueError("cost must be finite")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    f = C.min(axis=1)
    g = (C - f[:, None]).min(axis=0)
    Kt = np.exp(-(C - f[:, None] - g[None, :]) / epsilon)
    u = np.ones_like(p)
    v = np.ones_like(q)
    err = np.inf
    it = 0
    log_domain = False
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for it in range(1, max_iters + 1):
            u_new = p / (Kt @ v)
            v_new = q / (Kt.T @ u_new)
            if not (np.all(np.isfinite(u_new)) and np.all(np.isfinite(v_new))
                    and u_new.min() > 0 and v_new.min() > 0):
                # the scaled kernel underflowed; continue in the log domain
                f = f - epsilon * np.log(u)
                g = g - epsilon * np.log(v)
                log_domain = True
                break
            u, v = u_new, v_new
            if np.max(np.abs(np.log(u))) > 100.0 or np.max(np.abs(np.log(v))) > 100.0:
                f = f - epsilon * np.log(u)
                g = g - epsilon * np.log(v)
                Kt = np.exp(-(C - f[:, None] - g[None, :]) / epsilon)
                u = np.ones_like(p)
                v = np.ones_like(q)
            if it % 10 == 0 or it == max_iters:
                err = float(np.abs(u * (Kt @ v) - p).sum())
                if err < tol:
                    break
    if log_domain:
        lp, lq = np.log(p), np.log(q)
        for it in range(it, max_iters + 1):
            f = epsilon * (lp - logsumexp((g[None, :] - C) / epsilon, axis=1))
            g = epsilon * (lq - logsumexp((f[:, None] - C) / epsilon, axis=0))
            if it % 10 == 0 or it == max_iters:
                P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
                err = float(np.abs(P.sum(axis=1) - p).sum())
                if err < tol:
                    break
        P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    else:
        P = u[:, None] * Kt * v[None, :]
    P = round_to_marginals(P, p, q)
    return Coupling(np.maximum(P, 0.0), p, q,
                    {"iterations": it, "residual": err, "converged": bool(err < tol),
                     "log_domain": log_domain})


# -- solver ----------------------------------------------------------------------


class _Problem:
    """Fixed data of one fit plus the cached quantities that depend on ``psi``."""

    def __init__(self, Z, Zp, K, lam):
        self.Z, self.Zp, self.K, self.lam = Z, Zp, K, lam
        self.n, self.m = Z.shape[0], Zp.shape[0]
        self.p = uniform_weights(self.n)
        self.q = uniform_weights(self.m)
        self.gw = GWContractor(pairwise_distances(Z))

    def bind(self, model):
        """Cache images, pull-back distances and graph costs for ``model``."""
        Psi = model.apply(self.Zp)
        Dp = pairwise_distances(Psi)
        self.gw.set_target(Dp)
        from .core import euclidean_distances
        return Psi, Dp, euclidean_distances(self.Z, Psi)


def _lin(prob, C, alpha):
    return (1.0 - alpha) * prob.K + prob.lam * C


def _objective(prob, P, L, GWP, alpha):
    val = float(np.sum(L * P))
    if alpha > 0:
        val += alpha * float(np.sum(P * GWP))
    return val


def frank_wolfe_step(P, G, prob, L, GWP, alpha, config: OttmlConfig):
    """One conditional-gradient step with exact line search on the quadratic.

    Returns the new plan, its structural contraction, the step size and the
    Sinkhorn diagnostics of the direction.
    """
    # row and column constants do not change <G, Delta> on the polytope, so
    # scale epsilon by the doubly centred gradient rather than its offset
    Gc = G - G.mean(axis=1, keepdims=True) - G.mean(axis=0, keepdims=True) + G.mean()
    eps = config.sinkhorn_epsilon_factor * float(np.mean(np.abs(Gc)))
    if not eps > 0:
        eps = config.sinkhorn_epsilon_factor
    direction = sinkhorn(Gc, prob.p, prob.q, eps, config.sinkhorn_max_iters)
    Delta = direction.plan - P
    b = float(np.sum(G * Delta))
    if alpha > 0:
        GWdir = prob.gw.contract(direction.plan)
        dGW = GWdir - GWP
        a = alpha * float(np.sum(Delta * dGW))
    else:
        dGW = None
        a = 0.0
    if a > 0:
        tau = min(max(-b / (2.0 * a), 0.0), 1.0)
    else:
        tau = 1.0 if b < 0 else 0.0
    if tau > 0:
        P = P + tau * Delta
        if dGW is not None:
            GWP = GWP + tau * dGW
    return P, GWP, tau, direction.info


def _psi_value_and_grad(prob, model, P, alpha, want_grad=True):
    Psi, Dp, C = prob.bind(model)
    L = _lin(prob, C, alpha)
    if alpha > 0:
        if want_grad:
            GWP, Wsign = prob.gw.contract_with_signs(P)
        else:
            GWP, Wsign = prob.gw.contract(P), None
    else:
        GWP, Wsign = np.zeros((1, 1)), None
    val = _objective(prob, P, L, GWP, alpha)
    grad = None
    if want_grad:
        _, g = graph_point_gradient(P, prob.Z, Psi)
        g = prob.lam * g
        if alpha > 0:
            g = g + alpha * gw_point_gradient(Wsign, Psi, Dp)
        grad = model.vjp(prob.Zp, g)
    return val, grad, (L, GWP)


class _Adam:
    def __init__(self, size, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def direction(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad ** 2
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return mh / (np.sqrt(vh) + self.eps)


def fit_ottml(Z0, Z0prime, kernel: AlignmentKernelSpec | None = None,
              config: OttmlConfig | None = None, model: InverseMapModel | str = "affine") -> OttmlResult:
    """Alternate Frank-Wolfe coupling updates and backtracked Adam steps on ``psi``.

    ``model`` is an initial model or one of ``"affine"`` / ``"net"``; both
    strings start at the identity map.
    """
    kernel = kernel or AlignmentKernelSpec()
    config = config or OttmlConfig()
    Z, Zp = _arrays(Z0, Z0prime)
    d1 = Z.shape[1]
    if isinstance(model, str):
        if model == "affine":
            model = AffineMap.identity(d1)
        elif model == "net":
            model = ResidualNet.init(d1, seed=config.seed, data=Zp)
        else:
            raise ValueError(f"unknown model kind {model!r}")
    K = alignment_kernel_matrix(kernel, Z, Zp)
    prob = _Problem(Z, Zp, K, config.lambda_graph)
    P = np.outer(prob.p, prob.q)
    skip_fw = prob.n == 1 or prob.m == 1

    trace, regimes = [], []
    max_resid = 0.0
    n_fw = n_psi = n_rejected = 0
    sinkhorn_unconverged = 0
    converged = False
    adam = _Adam(model.n_params, config.psi_learning_rate)
    alpha = 0.0
    lr = config.psi_learning_rate
    n_evals = 0
    for outer in range(config.max_outer):
        if outer == config.warmup_outer:
            alpha = config.alpha_star
            adam = _Adam(model.n_params, config.psi_learning_rate)
            lr = config.psi_learning_rate
        Psi, Dp, C = prob.bind(model)
        L = _lin(prob, C, alpha)
        GWP = prob.gw.contract(P) if alpha > 0 else None
        # (a) coupling
        if not skip_fw:
            for _ in range(config.fw_iters_per_outer):
                G = L + 2.0 * alpha * GWP if alpha > 0 else L
                P, GWP, tau, info = frank_wolfe_step(P, G, prob, L, GWP, alpha, config)
                n_fw += 1
                sinkhorn_unconverged += not info["converged"]
                r = np.abs(P.sum(axis=1) - prob.p).max()
                c = np.abs(P.sum(axis=0) - prob.q).max()
                max_resid = max(max_resid, r, c)
        # (b) inverse map
        val, grad, _ = _psi_value_and_grad(prob, model, P, alpha)
        for _ in range(config.psi_steps_per_outer):
            step = adam.direction(grad)
            accepted = False
            for _ in range(30):
                cand = model.with_params(model.params() - lr * step)
                cval, cgrad, _ = _psi_value_and_grad(prob, cand, P, alpha)
                n_evals += 1
                if cval <= val:
                    model, val, grad = cand, cval, cgrad
                    accepted = True
                    break
                lr *= 0.5
            # a halved rate carries into the next step and recovers gradually;
            # doubling straight back wasted about one evaluation per step
            lr = min(config.psi_learning_rate, 1.25 * lr) if accepted else config.psi_learning_rate
            n_psi += 1
            n_rejected += not accepted
        trace.append(val)
        regimes.append(alpha)
        log.debug("outer %d alpha %.3g objective %.10g", outer, alpha, val)
        if outer > config.warmup_outer:
            prev = trace[-2]
            if abs(prev - val) <= config.rel_tol * max(abs(prev), 1e-300):
                converged = True
                break
    if prob.n == 1 and prob.m == 1:
        converged = converged or trace[-1] == 0.0
    P = round_to_marginals(np.maximum(P, 0.0), prob.p, prob.q)
    coupling = Coupling(P, prob.p, prob.q)
    r, c = coupling.marginal_residuals()
    diagnostics = {
        "final_alpha": alpha,
        "outer_iterations": len(trace),
        "fw_steps": n_fw,
        "psi_steps": n_psi,
        "psi_steps_rejected": n_rejected,
        "psi_objective_evaluations": n_evals,
        "sinkhorn_unconverged": sinkhorn_unconverged,
        "max_iterate_marginal_residual": float(max_resid),
        "marginal_residuals": [r, c],
        "alpha_per_outer": regimes,
        "config": asdict(config),
    }
    return OttmlResult(coupling, model, trace, converged, diagnostics)
