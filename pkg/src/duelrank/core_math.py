"""Bradley-Terry link, log-likelihood, and the regularized negative log-likelihood.

All functions accept scalars or numpy arrays and broadcast.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def _check_finite(t):
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite argument")
    return t


def sigmoid_link(t):
    """Return ``(mu, mu_prime)`` for the logistic link.

    ``mu_prime`` is computed as ``mu(t) * mu(-t)``, which keeps full relative
    precision in the tails where ``1 - mu(t)`` would round to zero.
    """
    t = _check_finite(t)
    mu = expit(t)
    mu_prime = mu * expit(-t)
    if mu.ndim == 0:
        return float(mu), float(mu_prime)
    return mu, mu_prime


def mu_prime(t):
    """Derivative of the link without input validation (hot path)."""
    return expit(t) * expit(-t)


def kappa(L):
    """Worst-case inverse link slope over ``|t| <= L``.

    The link slope is unimodal with its peak at zero, so the supremum sits at
    the boundary: ``1/mu'(L) = 2 + 2 cosh(L)``.
    """
    L = _check_finite(L)
    if np.any(L < 0):
        raise ValueError("negative range")
    out = 2.0 + 2.0 * np.cosh(L)
    return float(out) if out.ndim == 0 else out


def _neg_ll(t, y):
    # log(1 + e^t) - y t, equal to -(y log mu + (1-y) log(1-mu))
    return np.logaddexp(0.0, t) - y * t


def log_likelihood(t, y):
    """Per-record Bradley-Terry log-likelihood ``y log mu(t) + (1-y) log(1-mu(t))``."""
    t = _check_finite(t)
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    out = np.where(y == 1, -np.logaddexp(0.0, -t), -np.logaddexp(0.0, t))
    return float(out) if out.ndim == 0 else out


def nll_value_grad(X, y, theta, lam):
    """Array form of :func:`reg_nll_value_grad`."""
    X = np.asarray(X, dtype=float)
    theta = np.asarray(theta, dtype=float)
    n = X.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(theta)
    if X.shape[1] != theta.shape[0]:
        raise ValueError(f"dimension mismatch: features {X.shape[1]}, theta {theta.shape[0]}")
    t = X @ theta
    value = float(np.sum(_neg_ll(t, y)) + lam * n * (theta @ theta))
    grad = X.T @ (expit(t) - y) + 2.0 * lam * n * theta
    return value, grad


def reg_nll_value_grad(data, theta, lam):
    """Regularized negative log-likelihood of one dataset and its gradient.

    value = -sum_i l(x_i . theta, y_i) + lam * n * ||theta||^2

    ``data`` is anything exposing ``X`` (n x d) and ``y`` (n,) arrays, normally
    a :class:`duelrank.tasks.ComparisonDataset`.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return nll_value_grad(data.X, data.y, theta, lam)


def likelihood_bracket(t, t_star, y, L1, C):
    """Gaps of the two quadratic brackets of ``l(., y)`` around ``t_star``.

    upper_gap = l(t*) + (y - mu(t*))(t - t*) - (t - t*)^2 / (20 L1 kappa(|t*|)) - l(t)
    lower_gap = l(t) - [l(t*) + (y - mu(t*))(t - t*) - e^C (t - t*)^2 / kappa(|t*|)]

    Both are nonnegative whenever the preconditions hold. Vectorized over
    array inputs; returns floats for scalar inputs.
    """
    t = _check_finite(t)
    t_star = _check_finite(t_star)
    y = np.asarray(y)
    L1 = np.asarray(L1, dtype=float)
    C = np.asarray(C, dtype=float)
    ok = (
        ((y == 0) | (y == 1))
        & (np.abs(t) <= L1)
        & (np.abs(t_star) <= L1)
        & (L1 >= np.maximum(np.abs(t_star), 1.0))
        & (C > 1.0)
        & (np.abs(t - t_star) <= C)
    )
    if not np.all(ok):
        raise ValueError("bracket preconditions violated")
    ll = log_likelihood(t, y)
    ll_star = log_likelihood(t_star, y)
    dt = t - t_star
    tangent = ll_star + (y - expit(t_star)) * dt
    k_star = kappa(np.abs(t_star))
    upper = tangent - dt**2 / (20.0 * L1 * k_star) - ll
    lower = ll - (tangent - np.exp(C) * dt**2 / k_star)
    if np.ndim(upper) == 0:
        return float(upper), float(lower)
    return upper, lower
