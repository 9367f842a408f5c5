"""Frozen-feature analysis of the local objective.

With features ``psi`` frozen, each client's objective is a function of the
last-layer weight ``w`` of shape ``(d, K)``:

* ``loss_linear`` is the linearised objective whose distillation teacher is
  evaluated at the broadcast iterate ``w_t``;
* ``loss_surrogate`` replaces the distillation term by the quadratic form
  ``tr(w^T M w)`` with ``M = mean_j sum_i A_ij^T (A_ij - B_ij)``, where
  ``A_ij = U_i psi_ij^T`` (student lifted to the teacher grid) and
  ``B_ij = psi_{i-1,j}^T`` (teacher).

The surrogate is a fixed quadratic ``0.5 tr(w^T H w) - tr(b^T w) + c``, so
gradients, Hessians and minimisers are closed-form.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import LossCoeffs
from .model import LinearModel


# ----------------------------------------------------------- per-client pieces


def _pairs(lm: LinearModel, k: int):
    """Yield ``(i, A, B)`` with ``A, B`` of shape ``(n, m_{i-1}, d)``."""
    feats = lm.features[k]
    for i in range(1, len(feats)):
        U = lm.ops[k][i].dense()
        A = np.einsum("pq,ndq->npd", U, feats[i])
        B = feats[i - 1].transpose(0, 2, 1)
        yield i, A, B


@dataclass(frozen=True)
class Quadratic:
    """``0.5 tr(w^T H w) - tr(b^T w) + c``.

    ``H`` is the symmetric Hessian; the non-symmetric distillation matrix
    ``kd_M`` enters it as ``alpha (M + M^T)``.
    """

    H: np.ndarray  # (d, d); gradient is H @ w - b
    b: np.ndarray  # (d, K)
    c: float
    task_H: np.ndarray
    kd_M: np.ndarray  # non-symmetric distillation matrix, enters as tr(w^T M w)

    def value(self, w: np.ndarray) -> float:
        return float(0.5 * np.sum(w * (self.H @ w)) - np.sum(self.b * w) + self.c)

    def grad(self, w: np.ndarray) -> np.ndarray:
        return self.H @ w - self.b


def surrogate_quadratic(lm: LinearModel, k: int, coeffs: LossCoeffs) -> Quadratic:
    psi0 = lm.features[k][0]  # (n, d, m0)
    T = lm.targets[k]  # (n, m0, K)
    n, d, _ = psi0.shape
    task_H = 2.0 / n * np.einsum("ndm,nem->de", psi0, psi0)
    b = 2.0 / n * np.einsum("ndm,nmk->dk", psi0, T)
    c = float(np.sum(T * T) / n)
    M = np.zeros((d, d))
    for _, A, B in _pairs(lm, k):
        M += np.einsum("npd,npe->de", A, A - B) / n
    H = task_H + coeffs.alpha * (M + M.T) + coeffs.gamma * np.eye(d)
    return Quadratic(H, b, c, task_H, M)


def _task(lm: LinearModel, w: np.ndarray, k: int) -> tuple[float, np.ndarray]:
    psi0, T = lm.features[k][0], lm.targets[k]
    n = psi0.shape[0]
    r0 = np.einsum("ndm,dk->nmk", psi0, w) - T
    return float(np.sum(r0 * r0) / n), 2.0 / n * np.einsum("ndm,nmk->dk", psi0, r0)


def loss_linear(lm: LinearModel, w: np.ndarray, w_t: np.ndarray, coeffs: LossCoeffs, k: int = 0) -> float:
    """Linearised local loss with the distillation teacher frozen at ``w_t``."""
    _check_w(lm, w, w_t)
    n = lm.targets[k].shape[0]
    kd = 0.0
    for _, A, B in _pairs(lm, k):
        e = np.einsum("npd,dk->npk", B, w_t) - np.einsum("npd,dk->npk", A, w)
        kd += np.sum(e * e) / n
    return float(_task(lm, w, k)[0] + coeffs.alpha * kd + 0.5 * coeffs.gamma * np.sum(w * w))


def grad_linear(lm: LinearModel, w: np.ndarray, w_t: np.ndarray, coeffs: LossCoeffs, k: int = 0) -> np.ndarray:
    _check_w(lm, w, w_t)
    n = lm.targets[k].shape[0]
    kd = np.zeros_like(w)
    for _, A, B in _pairs(lm, k):
        e = np.einsum("npd,dk->npk", A, w) - np.einsum("npd,dk->npk", B, w_t)
        kd += 2.0 / n * np.einsum("npd,npk->dk", A, e)
    return _task(lm, w, k)[1] + coeffs.alpha * kd + coeffs.gamma * w


# The surrogate evaluates its task and regulariser terms with the same
# arithmetic as the linearised loss, so the two agree bitwise when alpha=0.


def loss_surrogate(lm: LinearModel, w: np.ndarray, coeffs: LossCoeffs, k: int = 0) -> float:
    _check_w(lm, w)
    M = surrogate_quadratic(lm, k, coeffs).kd_M
    kd = float(np.sum(w * (M @ w)))
    return float(_task(lm, w, k)[0] + coeffs.alpha * kd + 0.5 * coeffs.gamma * np.sum(w * w))


def grad_surrogate(lm: LinearModel, w: np.ndarray, coeffs: LossCoeffs, k: int = 0) -> np.ndarray:
    _check_w(lm, w)
    M = surrogate_quadratic(lm, k, coeffs).kd_M
    return _task(lm, w, k)[1] + coeffs.alpha * ((M + M.T) @ w) + coeffs.gamma * w


def sample_grad_surrogate(lm: LinearModel, w: np.ndarray, coeffs: LossCoeffs, k: int, j: int) -> np.ndarray:
    """Gradient of the single-sample summand ``j``; its mean over ``j`` is the full gradient."""
    psi0, T = lm.features[k][0][j], lm.targets[k][j]
    g = 2.0 * psi0 @ (psi0.T @ w - T)
    for _, A, B in _pairs(lm, k):
        Aj, Bj = A[j], B[j]
        M = Aj.T @ (Aj - Bj)
        g += coeffs.alpha * (M + M.T) @ w
    return g + coeffs.gamma * w


def _check_w(lm: LinearModel, *ws: np.ndarray) -> None:
    for w in ws:
        if w.shape != (lm.dim, lm.n_keypoints):
            raise ValueError(f"w must have shape {(lm.dim, lm.n_keypoints)}, got {w.shape}")


# ------------------------------------------------------- local equivalence


def check_local_equivalence(lm: LinearModel, w_t: np.ndarray, coeffs: LossCoeffs, k: int = 0) -> tuple[float, float]:
    """``(|L - Lbar|, ||grad L - grad Lbar||)`` at ``w = w_t``."""
    dv = abs(loss_linear(lm, w_t, w_t, coeffs, k) - loss_surrogate(lm, w_t, coeffs, k))
    dg = float(np.linalg.norm(grad_linear(lm, w_t, w_t, coeffs, k) - grad_surrogate(lm, w_t, coeffs, k)))
    return dv, dg


# --------------------------------------------------------------- constants


@dataclass(frozen=True)
class TheoryConstants:
    M_phi: float
    M_U: float
    M_T: float
    R: float
    alpha: float
    gamma: float
    r: int
    L: float = field(init=False)
    C: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "L", lipschitz_bound(self.M_phi, self.M_U, self.alpha, self.gamma, self.r))
        object.__setattr__(
            self, "C", grad_bound(self.M_phi, self.M_U, self.M_T, self.R, self.alpha, self.gamma, self.r)
        )

    def schedule_offset(self, E: int) -> float:
        return E + self.alpha * self.r * self.M_U**2 * self.M_phi**2 / self.gamma

    def to_dict(self) -> dict:
        return asdict(self)


def lipschitz_bound(M_phi: float, M_U: float, alpha: float, gamma: float, r: int) -> float:
    return 2.0 * (1.0 + alpha * (r - 1) * (M_U + 1.0) ** 2) * M_phi**2 + gamma


def grad_bound(M_phi: float, M_U: float, M_T: float, R: float, alpha: float, gamma: float, r: int) -> float:
    return 2.0 * M_phi * (M_phi * R + M_T) + 2.0 * alpha * (r - 1) * M_phi**2 * (M_U + 1.0) ** 2 * R + gamma * R


def compute_constants(lm: LinearModel, coeffs: LossCoeffs, R: float) -> TheoryConstants:
    M_phi = max(float(np.linalg.norm(a, ord=2, axis=(1, 2)).max()) for lv in lm.features for a in lv)
    norms_U = [op.spectral_norm() for ops in lm.ops for op in ops if op is not None]
    M_U = max(norms_U) if norms_U else 0.0
    M_T = max(float(np.linalg.norm(T.reshape(T.shape[0], -1), axis=1).max()) for T in lm.targets)
    r = max(len(lv) for lv in lm.features)
    return TheoryConstants(M_phi, M_U, M_T, float(R), coeffs.alpha, coeffs.gamma, r)


# ---------------------------------------------------------- bound checks


def _ball(rng: np.random.Generator, shape, R: float) -> np.ndarray:
    """Uniform sample from the Frobenius ball of radius ``R``."""
    x = rng.normal(size=shape)
    dim = x.size
    return x / np.linalg.norm(x) * R * rng.uniform() ** (1.0 / dim)


def verify_bounds(lm: LinearModel, consts: TheoryConstants, trials: int = 500, seed: int = 0) -> dict:
    """Empirical checks of smoothness, strong convexity and gradient bounds.

    Per client: the largest gradient-difference ratio over ``trials`` random
    pairs in the ``R``-ball, the smallest eigenvalue of the (symmetric)
    surrogate Hessian, and the largest full and single-sample gradient
    deviations over ``trials`` random points in the ball.
    """
    if trials < 100:
        raise ValueError("trials must be >= 100")
    coeffs = LossCoeffs(consts.alpha, consts.gamma)
    rng = np.random.default_rng(seed)
    shape = (lm.dim, lm.n_keypoints)
    clients = []
    for k in range(lm.n_clients):
        q = surrogate_quadratic(lm, k, coeffs)
        n = lm.targets[k].shape[0]
        lip = 0.0
        for _ in range(trials):
            u, v = _ball(rng, shape, consts.R), _ball(rng, shape, consts.R)
            lip = max(lip, float(np.linalg.norm(q.grad(u) - q.grad(v)) / np.linalg.norm(u - v)))
        min_eig = float(np.linalg.eigvalsh(0.5 * (q.H + q.H.T)).min())
        gmax, varmax = 0.0, 0.0
        for _ in range(trials):
            w = _ball(rng, shape, consts.R)
            g = q.grad(w)
            gmax = max(gmax, float(np.linalg.norm(g)))
            j = int(rng.integers(n))
            gj = sample_grad_surrogate(lm, w, coeffs, k, j)
            gmax = max(gmax, float(np.linalg.norm(gj)))
            varmax = max(varmax, float(np.linalg.norm(gj - g)))
        clients.append(
            {
                "client": k,
                "lipschitz_estimate": lip,
                "min_eigenvalue": min_eig,
                "max_grad_norm": gmax,
                "max_sample_deviation": varmax,
            }
        )
    out = {
        "lipschitz_estimate": max(c["lipschitz_estimate"] for c in clients),
        "min_eigenvalue": min(c["min_eigenvalue"] for c in clients),
        "max_grad_norm": max(c["max_grad_norm"] for c in clients),
        "max_sample_deviation": max(c["max_sample_deviation"] for c in clients),
        "clients": clients,
    }
    out["smooth_ok"] = out["lipschitz_estimate"] <= consts.L
    out["strongly_convex_ok"] = out["min_eigenvalue"] >= consts.gamma - 1e-9
    out["grad_bound_ok"] = out["max_grad_norm"] <= consts.C
    out["variance_bound_ok"] = out["max_sample_deviation"] <= consts.C
    return out


# ------------------------------------------------------------- convergence


def global_quadratic(lm: LinearModel, coeffs: LossCoeffs) -> Quadratic:
    qs = [surrogate_quadratic(lm, k, coeffs) for k in range(lm.n_clients)]
    mean = lambda attr: sum(getattr(q, attr) for q in qs) / len(qs)
    return Quadratic(mean("H"), mean("b"), float(mean("c")), mean("task_H"), mean("kd_M"))


def minimiser(q: Quadratic) -> np.ndarray:
    sym = 0.5 * (q.H + q.H.T)
    if np.linalg.eigvalsh(sym).min() <= 0:
        raise np.linalg.LinAlgError("surrogate Hessian is not positive definite; no unique minimiser")
    return np.linalg.solve(q.H, q.b)


def step_size(t: int, consts: TheoryConstants, E: int) -> float:
    return 1.0 / (consts.gamma * (consts.schedule_offset(E) + t))


@dataclass
class GapCurve:
    rounds: np.ndarray
    gap: np.ndarray
    step: np.ndarray
    optimum: float


def convergence_experiment(
    lm: LinearModel,
    T: int,
    consts: TheoryConstants,
    E: int = 5,
    *,
    seed: int = 0,
    repeats: int = 20,
    stochastic: bool = True,
    w0: np.ndarray | None = None,
) -> GapCurve:
    """FedAvg on the client surrogates with the decaying step schedule.

    Each round every client runs ``E`` local steps from the broadcast model,
    using single-sample gradients when ``stochastic``; the server averages.
    ``gap[t]`` is the global surrogate at ``w_t`` minus its minimum, averaged
    over ``repeats`` independent runs (``gap[0]`` is the starting point).
    """
    coeffs = LossCoeffs(consts.alpha, consts.gamma)
    qs = [surrogate_quadratic(lm, k, coeffs) for k in range(lm.n_clients)]
    qg = global_quadratic(lm, coeffs)
    w_star = minimiser(qg)
    f_star = qg.value(w_star)
    shape = (lm.dim, lm.n_keypoints)
    w_init = np.zeros(shape) if w0 is None else np.asarray(w0, dtype=np.float64)
    # per-sample pieces so a stochastic step is one small matmul
    per_sample = []
    for k, q in enumerate(qs):
        psi0, tgt = lm.features[k][0], lm.targets[k]
        Hj = 2.0 * np.einsum("ndm,nem->nde", psi0, psi0)
        bj = 2.0 * np.einsum("ndm,nmk->ndk", psi0, tgt)
        for _, A, B in _pairs(lm, k):
            Mj = np.einsum("npd,npe->nde", A, A - B)
            Hj += coeffs.alpha * (Mj + Mj.transpose(0, 2, 1))
        Hj += coeffs.gamma * np.eye(lm.dim)
        per_sample.append((Hj, bj))

    steps = np.array([step_size(t, consts, E) for t in range(T)])
    gaps = np.zeros(T + 1)
    rng = np.random.default_rng(seed)
    for _ in range(repeats if stochastic else 1):
        w = w_init.copy()
        gaps[0] += qg.value(w) - f_star
        for t in range(T):
            eta = steps[t]
            local = []
            for k, q in enumerate(qs):
                wk = w.copy()
                Hj, bj = per_sample[k]
                for _ in range(E):
                    if stochastic:
                        j = int(rng.integers(Hj.shape[0]))
                        g = Hj[j] @ wk - bj[j]
                    else:
                        g = q.grad(wk)
                    wk = wk - eta * g
                local.append(wk)
            w = sum(local) / len(local)
            gaps[t + 1] += qg.value(w) - f_star
    gaps /= repeats if stochastic else 1
    return GapCurve(np.arange(T + 1), gaps, steps, f_star)


def fit_inverse_t(rounds: np.ndarray, gap: np.ndarray) -> tuple[float, float]:
    """Least-squares ``gap ~ c / t``; returns ``(c, R^2)``."""
    x = 1.0 / rounds.astype(np.float64)
    c = float(np.dot(x, gap) / np.dot(x, x))
    resid = gap - c * x
    ss_tot = float(np.sum((gap - gap.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return c, r2


def mann_kendall(x: np.ndarray) -> tuple[float, float]:
    """Mann-Kendall trend statistic ``S`` and two-sided p-value (no tie correction)."""
    from scipy.stats import norm

    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    s = float(sum(np.sign(x[j + 1 :] - x[j]).sum() for j in range(n - 1)))
    var = n * (n - 1) * (2 * n + 5) / 18.0
    z = 0.0 if s == 0 else (s - math.copysign(1, s)) / math.sqrt(var)
    return s, float(2 * (1 - norm.cdf(abs(z))))
