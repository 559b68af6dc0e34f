"""Source-task sample allocation and task-relevance estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .estimators import ConvergenceError


@dataclass(frozen=True)
class AllocationPlan:
    n: np.ndarray
    N: int

    def __post_init__(self):
        if int(self.n.sum()) != self.N:
            raise ValueError("allocation does not sum to the budget")

    def tolist(self) -> list[int]:
        return self.n.tolist()


def active_sample(N: int, nu) -> AllocationPlan:
    """Split ``N`` source samples as ``(|nu_m| / (2 ||nu||_1) + 1/(2M)) N``.

    Real-valued targets are integerized by largest remainder (ties to the
    lower index), so the plan sums to ``N`` exactly and never drops below
    ``floor(N / (2M))`` for any task.
    """
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    M = nu.size
    N = int(N)
    if M < 1 or N < M:
        raise ValueError(f"need N >= M >= 1, got N={N}, M={M}")
    mag = np.abs(nu)
    l1 = float(mag.sum())
    if not math.isfinite(l1):
        raise ValueError("relevance must be finite")
    if l1 == 0:
        raise ValueError("undefined proportions")
    targets = (mag / (2.0 * l1) + 1.0 / (2.0 * M)) * N
    # absorb rounding noise so numerically-integral targets floor correctly
    base = np.floor(targets + 1e-9).astype(int)
    rem = targets - base
    short = N - int(base.sum())
    # stable sort keeps the lower index first among equal remainders
    order = np.argsort(-np.round(rem, 9), kind="stable")
    base[order[:short]] += 1
    return AllocationPlan(n=base, N=N)


def uniform_sample(N: int, M: int) -> AllocationPlan:
    """Equal split ``N / M`` with largest-remainder rounding."""
    return active_sample(N, np.ones(M))


@dataclass
class LassoProblem:
    theta_hats: np.ndarray  # (M, d)
    theta_target_hat: np.ndarray  # (d,)
    Lambda: np.ndarray  # (d, d)
    beta: float
    nu0: np.ndarray  # (M,), ||nu0||_1 = 1 with no zero entries
    R: float

    def __post_init__(self):
        self.theta_hats = np.atleast_2d(np.asarray(self.theta_hats, dtype=float))
        self.theta_target_hat = np.asarray(self.theta_target_hat, dtype=float)
        self.Lambda = np.asarray(self.Lambda, dtype=float)
        self.nu0 = np.atleast_1d(np.asarray(self.nu0, dtype=float))
        if abs(np.abs(self.nu0).sum() - 1.0) > 1e-12:
            raise ValueError("prior must have unit l1 norm")
        if np.any(self.nu0 == 0):
            raise ValueError("prior entries must be nonzero")
        if self.R <= 0:
            raise ValueError("R must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.nu0.size != self.theta_hats.shape[0]:
            raise ValueError("prior and parameters are not aligned")

    def gram(self):
        T = self.theta_hats  # rows are theta_m
        G = T @ self.Lambda @ T.T
        b = T @ self.Lambda @ self.theta_target_hat
        c = float(self.theta_target_hat @ self.Lambda @ self.theta_target_hat)
        return 0.5 * (G + G.T), b, c

    def objective(self, nu):
        G, b, c = self.gram()
        nu = np.asarray(nu, dtype=float)
        return float(0.5 * (nu @ G @ nu) - b @ nu + 0.5 * c + self.beta * np.abs(nu).sum())

    def feasible(self, nu, tol=1e-10):
        return float(np.sum(np.asarray(nu) ** 2 / np.abs(self.nu0))) <= self.R + tol


def soft_threshold(z, tau):
    return np.sign(z) * np.maximum(np.abs(z) - tau, 0.0)


def project_weighted_ball(u, weights, R, tol=1e-12):
    """Euclidean projection onto ``{v : sum v_m^2 / w_m <= R}``.

    The solution is ``u_m / (1 + 2 tau / w_m)``; ``tau >= 0`` is the root of a
    monotone scalar equation, taken from the feasible side.
    """
    u = np.asarray(u, dtype=float)
    w = np.asarray(weights, dtype=float)

    def excess(tau):
        v = u / (1.0 + 2.0 * tau / w)
        return float(np.sum(v * v / w)) - R

    if excess(0.0) <= 0:
        return u.copy()
    hi = 1.0
    while excess(hi) > 0:
        hi *= 2.0
    tau = brentq(excess, 0.0, hi, xtol=tol * 1e-6, rtol=4 * np.finfo(float).eps)
    # step to the feasible side of the root
    while excess(tau) > 0:
        tau = np.nextafter(tau, np.inf)
    return u / (1.0 + 2.0 * tau / w)


@dataclass
class LassoResult:
    nu: np.ndarray
    objective: float
    iterations: int
    trace: list = field(default_factory=list)
    max_excess: float = 0.0  # largest ellipsoid violation over all prox outputs


def lasso_relevance(p: LassoProblem, settings=None, max_iter=100000, tol=1e-10, return_result=False):
    """Minimize ``0.5 ||sum_m nu_m theta_m - theta||_Lambda^2 + beta ||nu||_1`` over the
    prior-weighted ellipsoid.

    Monotone accelerated proximal gradient (MFISTA) with step ``1/L``, ``L``
    the top eigenvalue of the Gram matrix in the Lambda inner product. The
    prox of l1-plus-ellipsoid is exactly soft-thresholding followed by the
    ellipsoid projection, because the projection rescales coordinates
    without changing their signs.
    """
    if settings is not None and hasattr(settings, "max_inner_iters"):
        max_iter = max(max_iter, settings.max_inner_iters)
    G, b, c = p.gram()
    w = np.abs(p.nu0)
    L = float(np.linalg.eigvalsh(G)[-1]) if G.size else 0.0
    M = b.size
    if L <= 0:
        # smooth part is constant; minimizer of the l1 term on the ellipsoid
        nu = np.zeros(M)
        res = LassoResult(nu=nu, objective=p.objective(nu), iterations=0)
        return res if return_result else nu
    step = 1.0 / L

    def F(v):
        return float(0.5 * (v @ G @ v) - b @ v + 0.5 * c + p.beta * np.abs(v).sum())

    def prox(z):
        return project_weighted_ball(soft_threshold(z, p.beta * step), w, p.R)

    x = np.zeros(M)
    fx = F(x)
    yv = x.copy()
    t = 1.0
    trace = [fx]
    excess = 0.0
    stalled = 0
    for it in range(1, max_iter + 1):
        stalled = stalled + 1 if len(trace) > 1 and trace[-1] >= trace[-2] else 0
        z = prox(yv - step * (G @ yv - b))
        excess = max(excess, float(np.sum(z * z / w)) - p.R)
        fz = F(z)
        x_old = x
        if fz <= fx:
            x, fx = z, fz
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        yv = x + (t / t_new) * (z - x) + ((t - 1.0) / t_new) * (x - x_old)
        t = t_new
        trace.append(fx)
        # gradient-mapping norm at the current iterate
        xp = prox(x - step * (G @ x - b))
        excess = max(excess, float(np.sum(xp * xp / w)) - p.R)
        gm = (x - xp) / step
        # a long run without any decrease means a fixed point at working precision
        if np.linalg.norm(gm) <= tol * (1.0 + abs(fx)) or (stalled >= 200 and np.linalg.norm(gm) <= 1e-6 * (1.0 + abs(fx)) * max(1.0, L)):
            res = LassoResult(nu=x, objective=fx, iterations=it, trace=trace, max_excess=excess)
            return res if return_result else x
        # the plain proximal step is a guaranteed descent step; keep it when it helps
        fp = F(xp)
        if fp < fx:
            x, fx = xp, fp
            trace[-1] = fx
    raise ConvergenceError("lasso_relevance did not converge", iterate=x, diagnostics={"trace": trace[-50:]})


def default_beta(theta_target_hat, Lambda, M: int, N_pre: int) -> float:
    """``||theta_hat||_Lambda * sqrt(log M / N_pre)``."""
    th = np.asarray(theta_target_hat, dtype=float)
    return float(math.sqrt(max(th @ Lambda @ th, 0.0)) * math.sqrt(math.log(M) / N_pre))


def default_R(theta_hats, theta_target_hat, Lambda, nu0) -> float:
    """Twice the prior-weighted cost of the minimum-norm least-squares representation."""
    T = np.atleast_2d(np.asarray(theta_hats, dtype=float))
    G = T @ Lambda @ T.T
    b = T @ Lambda @ np.asarray(theta_target_hat, dtype=float)
    nu_ls = np.linalg.pinv(G, rcond=1e-10) @ b
    r = 2.0 * float(np.sum(nu_ls**2 / np.abs(nu0)))
    return max(r, 1e-12)


__all__ = [
    "AllocationPlan",
    "active_sample",
    "uniform_sample",
    "LassoProblem",
    "LassoResult",
    "lasso_relevance",
    "soft_threshold",
    "project_weighted_ball",
    "default_beta",
    "default_R",
]
