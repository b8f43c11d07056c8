"""Learnable inverse site map and the pull-back geometry it induces.

Only the inverse map ``psi`` (target space to source space) is learned.  Every
target-side distance the solver needs is a source-space Euclidean distance
between ``psi``-images, so the forward map is never needed on the hot path; it
is materialized only for affine models when seeding synthesis.

Gradients use the exact subgradient of ``|.|`` and of the Euclidean norm, with
the value 0 at kinks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, pairwise_distances, euclidean_distances


def _as_array(Z) -> np.ndarray:
    return Z.values if isinstance(Z, Dataset) else np.asarray(Z, dtype=float)


class InverseMapModel:
    """Common interface of the ``psi`` parameterizations.

    Subclasses implement ``apply`` (rowwise on an ``(m, d+1)`` array), ``vjp``
    (pull an output cotangent back to the flat parameter vector) and
    ``input_vjp`` (pull it back to the inputs).
    """

    dim: int

    def _check(self, Z) -> tuple[np.ndarray, bool]:
        Z = np.asarray(Z, dtype=float)
        single = Z.ndim == 1
        Z2 = Z[None, :] if single else Z
        if Z2.ndim != 2 or Z2.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got shape {Z.shape}")
        return Z2, single

    def __call__(self, Z) -> np.ndarray:
        Z2, single = self._check(Z)
        out = self.apply(Z2)
        return out[0] if single else out

    @property
    def n_params(self) -> int:
        return self.params().size

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class AffineMap(InverseMapModel):
    """``psi(z') = A z' + b``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        b = np.array(self.b, dtype=float).ravel()
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != b.size:
            raise ValueError(f"affine map needs square A and matching b, got {A.shape} and {b.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("affine parameters must be finite")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def identity(cls, dim: int) -> "AffineMap":
        return cls(np.eye(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.b.size

    def apply(self, Z: np.ndarray) -> np.ndarray:
        return Z @ self.A.T + self.b

    def params(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.b])

    def with_params(self, theta) -> "AffineMap":
        theta = np.asarray(theta, dtype=float)
        p = self.dim
        return AffineMap(theta[: p * p].reshape(p, p), theta[p * p:])

    def vjp(self, Z: np.ndarray, gout: np.ndarray) -> np.ndarray:
        return np.concatenate([(gout.T @ Z).ravel(), gout.sum(axis=0)])

    def input_vjp(self, Z: np.ndarray, gout: np.ndarray) -> np.ndarray:
        return gout @ self.A

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.A))

    def forward_image(self, z) -> np.ndarray:
        """Solve ``psi(z') = z`` for ``z'``."""
        return np.linalg.solve(self.A, np.asarray(z, dtype=float) - self.b)

    def to_dict(self) -> dict:
        return {"variant": "affine", "dim": self.dim,
                "A": self.A.ravel().tolist(), "b": self.b.tolist()}


HIDDEN = 64


@dataclass(frozen=True)
class ResidualNet(InverseMapModel):
    """``psi(z') = z' + s * net((z' - m) / s)`` with a tanh MLP ``net``.

    ``m`` and ``s`` are fixed standardization constants (not trained).  The
    network maps ``d+1 -> 64 -> 64 -> d+1``; with every weight at zero, or
    with only the output layer at zero, ``psi`` is the identity.
    """

    theta: np.ndarray
    dim: int
    shift: np.ndarray = None
    scale: np.ndarray = None
    _shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        p = int(self.dim)
        shapes = ((HIDDEN, p), (HIDDEN,), (HIDDEN, HIDDEN), (HIDDEN,), (p, HIDDEN), (p,))
        size = sum(int(np.prod(s)) for s in shapes)
        theta = np.array(self.theta, dtype=float).ravel()
        if theta.size != size:
            raise ValueError(f"residual net with dim {p} needs {size} parameters, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("network parameters must be finite")
        shift = np.zeros(p) if self.shift is None else np.array(self.shift, dtype=float)
        scale = np.ones(p) if self.scale is None else np.array(self.scale, dtype=float)
        if np.any(scale <= 0):
            raise ValueError("standardization scale must be positive")
        for a in (theta, shift, scale):
            a.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "_shapes", shapes)

    @classmethod
    def init(cls, dim: int, seed: int = 0, data=None) -> "ResidualNet":
        """Identity-initialized net: random hidden layers, zero output layer."""
        rng = np.random.default_rng(seed)
        W1 = rng.normal(scale=1.0 / np.sqrt(dim), size=(HIDDEN, dim))
        W2 = rng.normal(scale=1.0 / np.sqrt(HIDDEN), size=(HIDDEN, HIDDEN))
        theta = np.concatenate([W1.ravel(), np.zeros(HIDDEN), W2.ravel(), np.zeros(HIDDEN),
                                np.zeros(dim * HIDDEN), np.zeros(dim)])
        shift = scale = None
        if data is not None:
            Z = _as_array(data)
            shift = Z.mean(axis=0)
            scale = Z.std(axis=0)
            scale = np.where(scale > 0, scale, 1.0)
        return cls(theta, dim, shift, scale)

    def _unpack(self):
        out, pos = [], 0
        for s in self._shapes:
            k = int(np.prod(s))
            out.append(self.theta[pos:pos + k].reshape(s))
            pos += k
        return out

    def _forward(self, Z):
        W1, b1, W2, b2, W3, b3 = self._unpack()
        U = (Z - self.shift) / self.scale
        H1 = np.tanh(U @ W1.T + b1)
        H2 = np.tanh(H1 @ W2.T + b2)
        O = H2 @ W3.T + b3
        return U, H1, H2, O

    def apply(self, Z: np.ndarray) -> np.ndarray:
        return Z + self.scale * self._forward(Z)[3]

    def params(self) -> np.ndarray:
        return self.theta.copy()

    def with_params(self, theta) -> "ResidualNet":
        return ResidualNet(theta, self.dim, self.shift, self.scale)

    def _backward(self, Z, gout):
        W1, b1, W2, b2, W3, b3 = self._unpack()
        U, H1, H2, _ = self._forward(Z)
        gO = gout * self.scale
        gW3 = gO.T @ H2
        gb3 = gO.sum(axis=0)
        gA2 = (gO @ W3) * (1.0 - H2 ** 2)
        gW2 = gA2.T @ H1
        gb2 = gA2.sum(axis=0)
        gA1 = (gA2 @ W2) * (1.0 - H1 ** 2)
        gW1 = gA1.T @ U
        gb1 = gA1.sum(axis=0)
        gU = gA1 @ W1
        grads = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2, gW3.ravel(), gb3])
        return grads, gU

    def vjp(self, Z: np.ndarray, gout: np.ndarray) -> np.ndarray:
        return self._backward(Z, gout)[0]

    def input_vjp(self, Z: np.ndarray, gout: np.ndarray) -> np.ndarray:
        return gout + self._backward(Z, gout)[1] / self.scale

    def to_dict(self) -> dict:
        return {"variant": "residual-net", "dim": self.dim, "hidden": HIDDEN,
                "theta": self.theta.tolist(), "shift": self.shift.tolist(),
                "scale": self.scale.tolist()}


def model_from_dict(doc: dict) -> InverseMapModel:
    variant = doc.get("variant")
    p = int(doc["dim"])
    if variant == "affine":
        return AffineMap(np.array(doc["A"], dtype=float).reshape(p, p), doc["b"])
    if variant == "residual-net":
        return ResidualNet(doc["theta"], p, doc["shift"], doc["scale"])
    raise ValueError(f"unknown model variant {variant!r}")


def apply_inverse_map(model: InverseMapModel, zprime) -> np.ndarray:
    return model(zprime)


def pullback_distance(model: InverseMapModel, z1prime, z2prime) -> float:
    """Distance between two target points measured through ``psi``."""
    a, b = model(np.asarray(z1prime, dtype=float)), model(np.asarray(z2prime, dtype=float))
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("pullback_distance takes single points")
    return float(np.linalg.norm(a - b))


def pullback_distance_matrix(model: InverseMapModel, Zprime) -> np.ndarray:
    return pairwise_distances(model(_as_array(Zprime)))


def graph_cost_matrix(model: InverseMapModel, Z0, Z0prime) -> np.ndarray:
    """``C[i, k] = |z_i - psi(z'_k)|``."""
    Z, Zp = _as_array(Z0), _as_array(Z0prime)
    if Z.shape[1] != Zp.shape[1]:
        raise ValueError(f"dimension mismatch: {Z.shape[1]} vs {Zp.shape[1]}")
    return euclidean_distances(Z, model(Zp))


# -- alignment kernel ------------------------------------------------------


class ECDF:
    """Per-coordinate empirical CDFs ``F(x) = #{x_i <= x} / n``."""

    def __init__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.sorted = np.sort(X, axis=0)
        self.n = X.shape[0]

    def __call__(self, x, h: int):
        return np.searchsorted(self.sorted[:, h], x, side="right") / self.n


@dataclass(frozen=True)
class AlignmentKernelSpec:
    stable_indices: tuple = (0,)
    mode: str = "rank"
    scale: float = 1.0

    def __post_init__(self):
        idx = tuple(int(h) for h in np.atleast_1d(self.stable_indices))
        if not idx:
            raise ValueError("stable_indices must be nonempty")
        if self.mode not in ("raw", "rank"):
            raise ValueError(f"kernel mode must be 'raw' or 'rank', got {self.mode!r}")
        if not self.scale > 0:
            raise ValueError("kernel scale must be positive")
        object.__setattr__(self, "stable_indices", idx)

    def validate(self, d: int) -> None:
        bad = [h for h in self.stable_indices if not 0 <= h < d]
        if bad:
            raise ValueError(f"stable index {bad[0]} outside [0, {d})")

    def to_dict(self) -> dict:
        return {"stable_indices": list(self.stable_indices), "mode": self.mode, "scale": self.scale}


def alignment_kernel(spec: AlignmentKernelSpec, z, zprime, source_ecdf: ECDF | None = None,
                     target_ecdf: ECDF | None = None) -> float:
    """Alignment cost between one source point and one target point."""
    z, zprime = np.asarray(z, dtype=float), np.asarray(zprime, dtype=float)
    spec.validate(z.size - 1)
    if spec.mode == "rank" and (source_ecdf is None or target_ecdf is None):
        raise ValueError("rank-mode kernel requires source and target ECDFs")
    acc = 0.0
    for h in spec.stable_indices:
        if spec.mode == "raw":
            acc += abs(z[h] - zprime[h])
        else:
            acc += abs(source_ecdf(z[h], h) - target_ecdf(zprime[h], h))
    return float(spec.scale * acc / len(spec.stable_indices))


def alignment_kernel_matrix(spec: AlignmentKernelSpec, Z0, Z0prime) -> np.ndarray:
    """``K[i, k]`` between every source and target control; ECDFs come from the two arms."""
    Z, Zp = _as_array(Z0), _as_array(Z0prime)
    spec.validate(Z.shape[1] - 1)
    K = np.zeros((Z.shape[0], Zp.shape[0]))
    if spec.mode == "rank":
        Fs, Ft = ECDF(Z), ECDF(Zp)
    for h in spec.stable_indices:
        a, b = Z[:, h], Zp[:, h]
        if spec.mode == "rank":
            a, b = Fs(a, h), Ft(b, h)
        K += np.abs(a[:, None] - b[None, :])
    return spec.scale * K / len(spec.stable_indices)


# -- gradients -------------------------------------------------------------


def _safe_unit(diff: np.ndarray, norm: np.ndarray) -> np.ndarray:
    """``diff / norm`` with zero where the norm vanishes (subgradient 0)."""
    out = np.zeros_like(diff)
    nz = norm > 0
    out[nz] = diff[nz] / norm[nz][..., None]
    return out


def graph_point_gradient(P: np.ndarray, Z: np.ndarray, Psi: np.ndarray):
    """Loss ``<C, P>`` and its gradient with respect to the images ``Psi``."""
    C = euclidean_distances(Z, Psi)
    M = np.zeros_like(C)
    nz = C > 0
    M[nz] = P[nz] / C[nz]
    g = M.sum(axis=0)[:, None] * Psi - M.T @ Z
    return float(np.sum(C * P)), g


def gw_point_gradient(Wsign: np.ndarray, Psi: np.ndarray, Dp: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``sum P_ik P_jl |D_ij - D'_kl|`` with respect to ``Psi``.

    ``Wsign[k, l] = sum_ij P_ik P_jl sign(D'_kl - D_ij)`` (symmetric).
    """
    if Dp is None:
        Dp = pairwise_distances(Psi)
    M = np.zeros_like(Dp)
    nz = Dp > 0
    M[nz] = Wsign[nz] / Dp[nz]
    return 2.0 * (M.sum(axis=1)[:, None] * Psi - M @ Psi)


def gw_sign_weights(D: np.ndarray, Dp: np.ndarray, P: np.ndarray) -> np.ndarray:
    from ._kernels import GWContractor
    g = GWContractor(D)
    g.set_target(Dp)
    return g.contract_with_signs(P)[1]


def synth_point_terms(zprime, z1, P, Z0, Psi0, model: InverseMapModel, lambda_s: float):
    """Synthesis loss at one candidate and the gradients wrt ``psi(z')`` and ``Psi0``.

    Returns ``(loss, g_image, g_Psi0)``; chain ``g_image`` through ``psi`` at
    ``z'`` to get the candidate or parameter gradient.
    """
    w = model(np.asarray(zprime, dtype=float)[None, :])[0]
    a = np.linalg.norm(Z0 - z1, axis=1)
    diff = Psi0 - w
    b = np.linalg.norm(diff, axis=1)
    R = a[:, None] - b[None, :]
    anchor = w - z1
    na = np.linalg.norm(anchor)
    loss = float(np.sum(np.abs(R) * P) + lambda_s * na)
    # d|a_i - b_k| / db_k = -sign(R); db_k / dw = -(Psi_k - w) / b_k
    s = (np.sign(R) * P).sum(axis=0)
    u = _safe_unit(diff, b)
    g_img = (s[:, None] * u).sum(axis=0)
    if na > 0:
        g_img = g_img + lambda_s * anchor / na
    g_Psi0 = -s[:, None] * u
    return loss, g_img, g_Psi0


def parameter_gradient(model: InverseMapModel, loss_kind: str, context: dict) -> np.ndarray:
    """Gradient of a model-dependent loss with respect to the flat parameters.

    ``loss_kind``:
      * ``"graph"``: ``sum_ik P_ik |z_i - psi(z'_k)|``; context keys
        ``coupling``, ``Z0``, ``Z0prime``.
      * ``"fgw-partial"``: ``alpha * sum P_ik P_jl |D_ij - D'_kl|`` with the
        pull-back ``D'``; additionally ``alpha`` (default 1).
      * ``"synth"``: the synthesis loss at a fixed candidate; additionally
        ``zprime``, ``z1`` and ``lambda_s``.
    """
    P = np.asarray(context["coupling"].plan if hasattr(context["coupling"], "plan")
                   else context["coupling"], dtype=float)
    Z, Zp = _as_array(context["Z0"]), _as_array(context["Z0prime"])
    Psi = model(Zp)
    if loss_kind == "graph":
        _, g = graph_point_gradient(P, Z, Psi)
        return model.vjp(Zp, g)
    if loss_kind == "fgw-partial":
        alpha = float(context.get("alpha", 1.0))
        Dp = pairwise_distances(Psi)
        Wsign = gw_sign_weights(pairwise_distances(Z), Dp, P)
        return alpha * model.vjp(Zp, gw_point_gradient(Wsign, Psi, Dp))
    if loss_kind == "synth":
        zc = np.asarray(context["zprime"], dtype=float)
        _, g_img, g_Psi0 = synth_point_terms(zc, np.asarray(context["z1"], dtype=float), P, Z,
                                             Psi, model, float(context["lambda_s"]))
        return model.vjp(Zp, g_Psi0) + model.vjp(zc[None, :], g_img[None, :])
    raise ValueError(f"unknown loss kind {loss_kind!r}")
