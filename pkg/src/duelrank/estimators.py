"""Constrained maximum-likelihood estimators and the information matrix.

Every estimator minimizes the regularized negative log-likelihood

    f_m(theta) = -sum_i l(x_i . theta, y_i) + lam * n_m * ||theta||^2

over the ball ``||theta|| <= B_theta``. The workhorse is a batched projected
gradient method that solves many independent small problems at once (one
per task), with Barzilai-Borwein trial steps and backtracking on the
descent-lemma condition, so every accepted step decreases the objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core_math import mu_prime
from .tasks import ComparisonDataset


class ConvergenceError(RuntimeError):
    """Raised when a solver exhausts its iteration budget.

    Carries the last iterate and its projected-gradient norm.
    """

    def __init__(self, message, iterate=None, grad_norm=None, diagnostics=None):
        super().__init__(message)
        self.iterate = iterate
        self.grad_norm = grad_norm
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SolverSettings:
    max_outer_iters: int = 1000
    max_inner_iters: int = 5000
    grad_tolerance: float = 1e-8  # relative: stop when ||pg|| <= tol * (1 + |f|)
    outer_tolerance: float = 1e-11  # relative objective decrease ending alternation
    restarts: int = 3
    shrink: float = 0.5
    max_backtracks: int = 60
    restart_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.grad_tolerance <= 0 or self.outer_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.restarts < 1:
            raise ValueError("need at least one restart")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


@dataclass
class EstimateBundle:
    theta_hat: np.ndarray  # (M, d)
    basis_hat: np.ndarray  # (d, k)
    Lambda: np.ndarray  # (d, d)
    theta_hat_target: np.ndarray | None = None
    lambdas_used: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        from .tasks import SCHEMA

        return {
            "schema": SCHEMA,
            "kind": "estimate_bundle",
            "theta_hat": np.asarray(self.theta_hat).tolist(),
            "basis_hat": np.asarray(self.basis_hat).tolist(),
            "theta_hat_target": None if self.theta_hat_target is None else np.asarray(self.theta_hat_target).tolist(),
            "Lambda": np.asarray(self.Lambda).tolist(),
            "lambdas_used": dict(self.lambdas_used),
        }

    @classmethod
    def from_dict(cls, doc):
        t = doc.get("theta_hat_target")
        return cls(
            theta_hat=np.array(doc["theta_hat"], dtype=float),
            basis_hat=np.array(doc["basis_hat"], dtype=float),
            Lambda=np.array(doc["Lambda"], dtype=float),
            theta_hat_target=None if t is None else np.array(t, dtype=float),
            lambdas_used=dict(doc.get("lambdas_used", {})),
        )


def default_lambda(M: int, N: int, B_x: float, B_theta: float, d: int, k: int) -> float:
    """Geometric midpoint of the admissible band ``B_x^2/d <~ N lam / M <~ k / B_theta^2``."""
    return (M / N) * math.sqrt((B_x**2 / d) * (k / B_theta**2))


# --------------------------------------------------------------------------
# batched ball-constrained logistic regression


class _Stack:
    """Rows of several tasks stored contiguously, task by task."""

    def __init__(self, Z, y, counts, reg):
        self.Z = np.ascontiguousarray(Z, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.counts = np.asarray(counts, dtype=int)
        self.M = self.counts.size
        self.rows = np.repeat(np.arange(self.M), self.counts)
        starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self.nonempty = self.counts > 0
        self.starts = starts[self.nonempty]
        self.reg = np.asarray(reg, dtype=float)

    def segsum(self, v):
        out = np.zeros((self.M,) + v.shape[1:])
        if self.starts.size:
            out[self.nonempty] = np.add.reduceat(v, self.starts, axis=0)
        return out

    def value_grad(self, W):
        t = np.einsum("ij,ij->i", self.Z, W[self.rows])
        f = self.segsum(np.logaddexp(0.0, t) - self.y * t) + self.reg * np.einsum("ij,ij->i", W, W)
        r = expit(t) - self.y
        G = self.segsum(r[:, None] * self.Z) + 2.0 * self.reg[:, None] * W
        return f, G


def _project_rows(W, radius):
    norms = np.linalg.norm(W, axis=1)
    scale = np.where(norms > radius, radius / np.maximum(norms, 1e-300), 1.0)
    return W * scale[:, None]


def _solve_batched(stack: _Stack, W0, radius, settings: SolverSettings, max_iter=None):
    """Projected gradient on every task at once; returns (W, f, pg, iters, converged)."""
    max_iter = settings.max_inner_iters if max_iter is None else max_iter
    W = _project_rows(np.array(W0, dtype=float), radius)
    f, G = stack.value_grad(W)
    # conservative first step: inverse of a Lipschitz bound of each task's gradient
    lip = 0.25 * stack.segsum(np.einsum("ij,ij->i", stack.Z, stack.Z)) + 2.0 * stack.reg
    s = 1.0 / np.maximum(lip, 1e-12)
    stalled = np.zeros(stack.M, dtype=bool)
    pg = np.linalg.norm(W - _project_rows(W - G, radius), axis=1)
    for it in range(max_iter + 1):
        pg = np.linalg.norm(W - _project_rows(W - G, radius), axis=1)
        done = (pg <= settings.grad_tolerance * (1.0 + np.abs(f))) | stalled
        if done.all():
            return W, f, pg, it, not stalled.any() or bool(np.all(pg[stalled] <= 1e-6 * (1 + np.abs(f[stalled]))))
        if it == max_iter:
            break
        W_old, G_old = W.copy(), G.copy()
        pending = ~done
        for _ in range(settings.max_backtracks):
            Wt = W.copy()
            Wt[pending] = _project_rows(W[pending] - s[pending, None] * G[pending], radius)
            ft, Gt = stack.value_grad(Wt)
            D = Wt - W
            bound = f + np.einsum("ij,ij->i", G, D) + np.einsum("ij,ij->i", D, D) / (2.0 * s)
            ok = pending & (ft <= bound + 1e-15 * np.abs(f)) & (ft <= f)
            W[ok], f[ok], G[ok] = Wt[ok], ft[ok], Gt[ok]
            pending &= ~ok
            if not pending.any():
                break
            s[pending] *= settings.shrink
        stalled |= pending
        dW = W - W_old
        dG = G - G_old
        sy = np.einsum("ij,ij->i", dW, dG)
        ss = np.einsum("ij,ij->i", dW, dW)
        moved = ss > 0
        bb = np.where(sy > 0, ss / np.where(sy > 0, sy, 1.0), 2.0 * s)
        s = np.where(moved, np.clip(bb, 1e-12, 1e12), s)
    return W, f, pg, max_iter, False


def _stack_datasets(datasets: Sequence[ComparisonDataset]):
    X = np.vstack([np.asarray(ds.X, dtype=float).reshape(len(ds), -1) for ds in datasets])
    y = np.concatenate([np.asarray(ds.y, dtype=float) for ds in datasets])
    counts = np.array([len(ds) for ds in datasets], dtype=int)
    return X, y, counts


def _check_dims(datasets, d=None):
    for ds in datasets:
        X = np.asarray(ds.X)
        if X.ndim != 2:
            raise ValueError("feature array must be 2-d")
        if d is not None and X.shape[0] and X.shape[1] != d:
            raise ValueError(f"dimension mismatch: features {X.shape[1]}, expected {d}")


def single_task_mle(data: ComparisonDataset, lam: float, B_theta: float, settings: SolverSettings | None = None):
    """Ball-constrained regularized MLE of one task's parameter."""
    settings = settings or SolverSettings()
    if data.n < 1:
        raise ValueError("single_task_mle needs at least one record")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    X = np.asarray(data.X, dtype=float)
    stack = _Stack(X, data.y, [data.n], [lam * data.n])
    W, f, pg, it, ok = _solve_batched(stack, np.zeros((1, X.shape[1])), B_theta, settings)
    if not ok:
        raise ConvergenceError(
            f"single_task_mle did not converge in {it} iterations (pg={pg[0]:.3e})",
            iterate=W[0], grad_norm=float(pg[0]),
        )
    return W[0]


def subspace_mle(data: ComparisonDataset, basis, lam: float, B_theta: float, settings: SolverSettings | None = None):
    """Regularized MLE restricted to the column span of an orthonormal ``basis``."""
    settings = settings or SolverSettings()
    basis = np.asarray(basis, dtype=float)
    if basis.ndim != 2 or not np.allclose(basis.T @ basis, np.eye(basis.shape[1]), atol=1e-8):
        raise ValueError("basis must have orthonormal columns")
    if data.n < 1:
        raise ValueError("subspace_mle needs at least one record")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    _check_dims([data], basis.shape[0])
    Z = np.asarray(data.X, dtype=float) @ basis
    stack = _Stack(Z, data.y, [data.n], [lam * data.n])
    W, f, pg, it, ok = _solve_batched(stack, np.zeros((1, basis.shape[1])), B_theta, settings)
    if not ok:
        raise ConvergenceError(
            f"subspace_mle did not converge in {it} iterations (pg={pg[0]:.3e})",
            iterate=basis @ W[0], grad_norm=float(pg[0]),
        )
    return basis @ W[0]


# --------------------------------------------------------------------------
# joint low-rank estimator


def _sign_fix(U):
    """Make the first nonzero entry of every column positive."""
    U = np.array(U, dtype=float)
    for j in range(U.shape[1]):
        nz = np.flatnonzero(np.abs(U[:, j]) > 1e-12)
        if nz.size and U[nz[0], j] < 0:
            U[:, j] = -U[:, j]
    return U


def spectral_basis(thetas, k, rng=None):
    """Top-``k`` left singular vectors of the stacked parameters (d x M).

    Directions beyond the numerical rank are filled with random directions
    orthogonal to the leading ones.
    """
    T = np.asarray(thetas, dtype=float)
    d = T.shape[0]
    U, s, _ = np.linalg.svd(T, full_matrices=False)
    tol = 1e-10 * (s[0] if s.size else 0.0)
    r = min(k, int(np.sum(s > tol)) if s.size else 0)
    B = _sign_fix(U[:, :r])
    if r < k:
        rng = rng if rng is not None else np.random.default_rng(0)
        extra = rng.standard_normal((d, k - r))
        extra -= B @ (B.T @ extra)
        Q, _ = np.linalg.qr(extra)
        B = np.hstack([B, _sign_fix(Q)])
        B, _ = np.linalg.qr(B)
        B = _sign_fix(B)
    return B


def _sym(A):
    return 0.5 * (A + A.T)


def _qf(A):
    """Q factor of a thin QR with a positive-diagonal convention."""
    Q, R = np.linalg.qr(A)
    sgn = np.sign(np.diag(R))
    sgn[sgn == 0] = 1.0
    return Q * sgn


class _JointProblem:
    """Factored objective ``F(B, W) = sum_m f_m(B w_m)`` with orthonormal B."""

    def __init__(self, X, y, counts, reg, radius):
        self.X = np.ascontiguousarray(X)
        self.y = y
        self.counts = counts
        self.reg = reg
        self.radius = radius
        self.rows = np.repeat(np.arange(len(counts)), counts)

    def value(self, B, W):
        t = np.einsum("ij,ij->i", self.X @ B, W[self.rows])
        TH = W @ B.T
        return float(np.sum(np.logaddexp(0.0, t) - self.y * t) + np.sum(self.reg * np.einsum("ij,ij->i", TH, TH)))

    def value_grad_B(self, B, W):
        Wr = W[self.rows]
        t = np.einsum("ij,ij->i", self.X @ B, Wr)
        TH = W @ B.T
        F = float(np.sum(np.logaddexp(0.0, t) - self.y * t) + np.sum(self.reg * np.einsum("ij,ij->i", TH, TH)))
        r = expit(t) - self.y
        G = self.X.T @ (r[:, None] * Wr) + 2.0 * B @ ((W * self.reg[:, None]).T @ W)
        return F, G

    def w_step(self, B, W, settings):
        stack = _Stack(self.X @ B, self.y, self.counts, self.reg)
        W, f, pg, it, _ = _solve_batched(stack, W, self.radius, settings)
        return W, it

    def b_step(self, B, W, settings, max_iter):
        """Riemannian gradient descent on orthonormal B with the w_m fixed.

        Orthonormal B keeps ``||B w_m|| = ||w_m||``, so the ball constraint
        lives entirely in the w-step. Trials are retracted to the Stiefel
        manifold by QR and accepted under an Armijo condition.
        """
        F, G = self.value_grad_B(B, W)
        xi = G - B @ _sym(B.T @ G)
        s = 1.0 / max(0.25 * np.sum(self.X**2) * max(np.max(np.sum(W**2, 1)), 1e-12), 1e-12)
        it = 0
        for it in range(max_iter):
            gn2 = float(np.sum(xi * xi))
            if math.sqrt(gn2) <= settings.grad_tolerance * (1.0 + abs(F)):
                break
            step = s
            accepted = False
            for _ in range(settings.max_backtracks):
                Bt = _qf(B - step * xi)
                Ft = self.value(Bt, W)
                if Ft <= F - 1e-4 * step * gn2:
                    accepted = True
                    break
                step *= settings.shrink
            if not accepted:
                break
            F, Gt = self.value_grad_B(Bt, W)
            xit = Gt - Bt @ _sym(Bt.T @ Gt)
            dB, dX = Bt - B, xit - xi
            B, xi = Bt, xit
            sy = abs(float(np.sum(dB * dX)))
            s = float(np.clip(np.sum(dB * dB) / sy, 1e-12, 1e12)) if sy > 0 else 2 * step
        return B, it

    def alternate(self, B, W, settings):
        B = _qf(B)
        W = _project_rows(W, self.radius)
        F = self.value(B, W)
        history = [F]
        converged = False
        inner = 0
        for _ in range(settings.max_outer_iters):
            W, i1 = self.w_step(B, W, settings)
            F_w = self.value(B, W)
            B, i2 = self.b_step(B, W, settings, settings.max_inner_iters)
            inner += i1 + i2
            F_new = self.value(B, W)
            slack = 1e-12 * (1.0 + abs(F))
            if F_w > F + slack or F_new > F_w + slack:
                raise ConvergenceError(
                    f"alternating step increased the objective ({F} -> {F_w} -> {F_new})",
                    iterate=(B, W), diagnostics={"history": history},
                )
            history.append(F_new)
            decrease = F - F_new
            F = F_new
            if decrease <= settings.outer_tolerance * (1.0 + abs(F)):
                converged = True
                break
        return B, W, F, {"history": history, "outer_iters": len(history) - 1, "inner_iters": inner, "converged": converged}


def joint_lowrank_mle(
    datasets: Sequence[ComparisonDataset],
    lam: float,
    k: int,
    B_theta: float,
    settings: SolverSettings | None = None,
    return_diagnostics: bool = False,
):
    """Rank-``k`` joint regularized MLE of the source parameters.

    Factorizes ``theta_m = B w_m`` and alternates batched w-steps with a
    B-step, starting from the spectral basis of independent single-task fits
    (restart 0) and from perturbations of it (restarts 1, 2, ...). Restart
    ``r`` depends only on ``(settings.seed, r)``, so more restarts never give
    a worse objective. Returns ``(theta_hats (M x d), basis_hat (d x k))``.
    """
    settings = settings or SolverSettings()
    if any(len(ds) == 0 for ds in datasets):
        raise ValueError("every source dataset must be nonempty")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    X, y, counts = _stack_datasets(datasets)
    d = X.shape[1]
    _check_dims(datasets, d)
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= d")
    M = len(datasets)
    reg = lam * counts.astype(float)
    prob = _JointProblem(X, y, counts, reg, B_theta)

    singles, _, pg, it, ok = _solve_batched(_Stack(X, y, counts, reg), np.zeros((M, d)), B_theta, settings)
    if not ok:
        raise ConvergenceError("single-task initialization did not converge", iterate=singles, grad_norm=float(pg.max()))
    B_spec = spectral_basis(singles.T, k, np.random.default_rng([settings.seed, 0]))
    if k >= M:
        # the rank constraint is vacuous, so the independent fits are the joint optimum
        F = float(np.sum(_Stack(X, y, counts, reg).value_grad(singles)[0]))
        if return_diagnostics:
            return singles, B_spec, {"objective": F, "history": [F], "runs": [{"restart": 0, "objective": F, "converged": True}]}
        return singles, B_spec

    best = None
    runs = []
    for r in range(settings.restarts):
        if r == 0:
            B0 = B_spec
        else:
            rng = np.random.default_rng([settings.seed, r])
            B0, _ = np.linalg.qr(B_spec + settings.restart_noise * rng.standard_normal((d, k)))
        W0 = singles @ B0
        B, W, F, diag = prob.alternate(B0, W0, settings)
        runs.append({"restart": r, "objective": F, **{kk: v for kk, v in diag.items() if kk != "history"}})
        if best is None or F < best[2]:
            best = (B, W, F, diag)
    B, W, F, diag = best
    if not diag["converged"]:
        raise ConvergenceError(
            f"joint_lowrank_mle did not converge in {settings.max_outer_iters} outer iterations",
            iterate=W @ B.T, diagnostics={"runs": runs},
        )
    theta_hats = W @ B.T
    basis = _sign_fix(B)
    if return_diagnostics:
        return theta_hats, basis, {"objective": F, "history": diag["history"], "runs": runs}
    return theta_hats, basis


def joint_objective(datasets, theta_hats, lam):
    """Joint regularized NLL ``sum_m f_m(theta_m)`` for already fitted parameters."""
    X, y, counts = _stack_datasets(datasets)
    stack = _Stack(X, y, counts, lam * counts.astype(float))
    f, _ = stack.value_grad(np.asarray(theta_hats, dtype=float))
    return float(np.sum(f))


def information_matrix(datasets, theta_hats, lambda_min: float, N: int | None = None):
    """``(1/N) sum_m sum_i mu'(x . theta_hat_m) x x^T + lambda_min I``."""
    theta_hats = np.atleast_2d(np.asarray(theta_hats, dtype=float))
    if len(datasets) != theta_hats.shape[0]:
        raise ValueError("datasets and theta_hats are not aligned")
    d = theta_hats.shape[1]
    _check_dims(datasets, d)
    total = sum(len(ds) for ds in datasets)
    N = N if N is not None else max(total, 1)
    if N <= 0:
        raise ValueError("N must be positive")
    Lam = np.zeros((d, d))
    for ds, th in zip(datasets, theta_hats):
        if len(ds) == 0:
            continue
        X = np.asarray(ds.X, dtype=float)
        w = mu_prime(X @ th)
        Lam += (X * w[:, None]).T @ X
    Lam = 0.5 * (Lam + Lam.T) / N + lambda_min * np.eye(d)
    return Lam


__all__ = [
    "ConvergenceError",
    "SolverSettings",
    "EstimateBundle",
    "default_lambda",
    "single_task_mle",
    "subspace_mle",
    "joint_lowrank_mle",
    "joint_objective",
    "spectral_basis",
    "information_matrix",
]
