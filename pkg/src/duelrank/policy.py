"""Confidence ellipsoids, pessimistic policy extraction and policy evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .tasks import SCHEMA, MultiTaskInstance

MAX_ENUMERATION = 10**6
# floats held at once while enumerating policies
_BLOCK_FLOATS = 4_000_000


def _cholesky(A, what="matrix"):
    try:
        return linalg.cholesky(np.asarray(A, dtype=float), lower=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise ValueError(f"{what} must be positive definite") from exc


@dataclass(frozen=True, eq=False)
class ConfidenceEllipsoid:
    """``{theta : ||theta - center||_shape <= radius}``."""

    center: np.ndarray
    shape: np.ndarray
    radius: float
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "shape", np.asarray(self.shape, dtype=float))
        if not np.isfinite(self.radius) or self.radius < 0:
            raise ValueError("radius must be finite and nonnegative")
        if self.shape.shape != (self.center.size, self.center.size):
            raise ValueError("shape and center dimensions differ")
        object.__setattr__(self, "chol", _cholesky(self.shape, "ellipsoid shape"))

    @property
    def d(self) -> int:
        return self.center.size

    def whiten(self, V):
        """Rows of ``V`` mapped by ``L^{-1}`` so that their 2-norm is the dual norm."""
        V = np.asarray(V, dtype=float)
        flat = V.reshape(-1, self.d)
        out = linalg.solve_triangular(self.chol, flat.T, lower=True).T
        return out.reshape(V.shape)

    def dual_norm(self, V):
        """``||v||_{shape^{-1}}`` for each row of ``V``."""
        return np.linalg.norm(self.whiten(V), axis=-1)

    def lower_value(self, V):
        """Worst-case ``v . theta`` over the ellipsoid, per row of ``V``."""
        V = np.asarray(V, dtype=float)
        return V @ self.center - self.radius * self.dual_norm(V)

    def contains(self, theta, tol=0.0) -> bool:
        diff = np.asarray(theta, dtype=float) - self.center
        return float(np.sqrt(max(diff @ self.shape @ diff, 0.0))) <= self.radius + tol


@dataclass(frozen=True, eq=False)
class Policy:
    action: np.ndarray  # (n_contexts,) action index per context
    method_tag: str

    def __post_init__(self):
        a = np.asarray(self.action, dtype=int).copy()
        a.setflags(write=False)
        object.__setattr__(self, "action", a)
        if self.method_tag not in ("exact", "greedy"):
            raise ValueError(f"unknown method tag {self.method_tag!r}")

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "kind": "policy",
            "action": {str(s): int(a) for s, a in enumerate(self.action)},
            "method_tag": self.method_tag,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema") != SCHEMA or doc.get("kind") != "policy":
            raise ValueError("not a duelrank/v1 policy document")
        amap = {int(s): int(a) for s, a in doc["action"].items()}
        if sorted(amap) != list(range(len(amap))):
            raise ValueError("policy does not cover contexts 0..S-1")
        return cls(action=[amap[s] for s in range(len(amap))], method_tag=doc["method_tag"])

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _view(inst_view):
    if isinstance(inst_view, MultiTaskInstance):
        return inst_view.phi, inst_view.rho
    phi, rho = inst_view
    phi = np.asarray(phi, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if phi.ndim != 3 or rho.shape != (phi.shape[0],):
        raise ValueError("expected phi (S, A, d) and rho (S,)")
    return phi, rho


def policy_feature(phi, rho, actions):
    """``sum_s rho(s) phi(s, pi(s))``."""
    actions = np.asarray(actions, dtype=int)
    return rho @ phi[np.arange(phi.shape[0]), actions]


def policy_value(inst_view, ell: ConfidenceEllipsoid, actions) -> float:
    """Pessimistic value ``v . center - radius ||v||_{shape^{-1}}``."""
    phi, rho = _view(inst_view)
    return float(ell.lower_value(policy_feature(phi, rho, actions)))


def policy_space_size(n_contexts: int, n_actions: int) -> int:
    return int(n_actions) ** int(n_contexts)


def _exact(phi, rho, ell):
    S, A, d = phi.shape
    # per-context contributions in both the linear and the whitened metric
    lin = rho[:, None] * (phi @ ell.center)  # (S, A)
    U = rho[:, None, None] * ell.whiten(phi)  # (S, A, d)
    tail = 0
    while tail < S and A ** (tail + 1) * d <= _BLOCK_FLOATS:
        tail += 1
    tail = max(tail, 1)
    head = S - tail
    # enumerate the trailing contexts once; a_0 is the most significant digit
    tl = np.zeros(1)
    tu = np.zeros((1, d))
    for s in range(head, S):
        tl = (tl[:, None] + lin[s][None, :]).reshape(-1)
        tu = (tu[:, None, :] + U[s][None, :, :]).reshape(-1, d)
    best_val, best_idx = -np.inf, 0
    n_tail = tl.size
    for h in range(A**head):
        digits = np.unravel_index(h, (A,) * head) if head else ()
        hl = sum(lin[s, digits[s]] for s in range(head)) if head else 0.0
        hu = sum(U[s, digits[s]] for s in range(head)) if head else np.zeros(d)
        vals = (hl + tl) - ell.radius * np.linalg.norm(hu + tu, axis=1)
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_val, best_idx = float(vals[j]), h * n_tail + j
    return np.array(np.unravel_index(best_idx, (A,) * S), dtype=int).reshape(S)


def _greedy(phi, ell):
    scores = ell.lower_value(phi)  # (S, A)
    return np.argmax(scores, axis=1)


def pessimistic_policy(inst_view, ell: ConfidenceEllipsoid, mode: str = "auto") -> Policy:
    """Policy maximizing the worst-case expected reward over ``ell``.

    ``exact`` enumerates every deterministic policy and keeps the
    lexicographically first maximizer; ``greedy`` maximizes the per-context
    lower confidence bound; ``auto`` uses ``exact`` when the policy space
    has at most a million members.
    """
    phi, rho = _view(inst_view)
    S, A, d = phi.shape
    if d != ell.d:
        raise ValueError("feature and ellipsoid dimensions differ")
    size = policy_space_size(S, A)
    if mode == "auto":
        mode = "exact" if size <= MAX_ENUMERATION else "greedy"
    if mode == "exact":
        if size > MAX_ENUMERATION:
            raise ValueError("enumeration infeasible, use greedy")
        return Policy(_exact(phi, rho, ell), "exact")
    if mode == "greedy":
        return Policy(_greedy(phi, ell), "greedy")
    raise ValueError(f"unknown mode {mode!r}")


def optimal_actions(inst: MultiTaskInstance) -> np.ndarray:
    return np.argmax(inst.rewards(), axis=1)


def evaluate_suboptimality(inst: MultiTaskInstance, pi: Policy) -> float:
    """Expected true-reward gap to the optimal action under the target context law."""
    actions = np.asarray(pi.action if isinstance(pi, Policy) else pi, dtype=int)
    if actions.shape != (inst.n_contexts,):
        raise ValueError("policy does not cover every context")
    if actions.min() < 0 or actions.max() >= inst.n_actions:
        raise ValueError("policy action out of range")
    r = inst.rewards()
    gap = r.max(axis=1) - r[np.arange(inst.n_contexts), actions]
    return float(max(inst.rho @ gap, 0.0))


def coverage_coefficient(inst: MultiTaskInstance, H) -> float:
    """``||sum_s rho(s) phi(s, pi*(s))||^2_{H^{-1}}`` for the optimal policy."""
    Lc = _cholesky(H, "H")
    v = policy_feature(inst.phi, inst.rho, optimal_actions(inst))
    z = linalg.solve_triangular(Lc, v, lower=True)
    return float(z @ z)


def reward_range(inst: MultiTaskInstance) -> float:
    r = inst.rewards()
    return float(r.max() - r.min())


__all__ = [
    "ConfidenceEllipsoid",
    "Policy",
    "pessimistic_policy",
    "policy_value",
    "policy_feature",
    "policy_space_size",
    "evaluate_suboptimality",
    "coverage_coefficient",
    "optimal_actions",
    "reward_range",
    "MAX_ENUMERATION",
]
