"""Synthetic multi-task dueling-bandit worlds and their ground-truth oracles.

Tasks are indexed ``0 .. M-1`` for the sources and ``M`` for the target.
Contexts and actions are finite, so every population quantity (Fisher
matrices, coverage, suboptimality) is an exact finite sum.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import linalg
from scipy.optimize import linprog
from scipy.special import expit

from .core_math import mu_prime

SCHEMA = "duelrank/v1"


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _parse_profile(profile: str) -> tuple[str, float | None]:
    m = re.fullmatch(r"\s*(uniform|geometric|sparse)\s*(?:\(\s*([0-9.eE+-]+)\s*\)|:\s*([0-9.eE+-]+))?\s*", profile)
    if m is None:
        raise ValueError(f"unknown relevance profile {profile!r}")
    kind, a, b = m.groups()
    arg = a if a is not None else b
    if kind == "uniform":
        return kind, None
    if arg is None:
        raise ValueError(f"profile {kind!r} needs an argument, e.g. {kind}(0.3)")
    return kind, float(arg)


@dataclass(frozen=True)
class InstanceConfig:
    """Size and norm bounds of a synthetic world.

    ``relevance_profile`` is ``"uniform"``, ``"geometric(r)"`` or ``"sparse(s)"``.
    Feature differences satisfy ``||x|| <= B_x`` and parameters
    ``||theta|| <= B_theta``, so ``|x . theta| <= B_x * B_theta``.
    """

    d: int = 8
    k: int = 2
    M: int = 4
    n_contexts: int = 20
    n_actions: int = 5
    B_x: float = 2.0
    B_theta: float = 4.0
    relevance_profile: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("d must be at least 2")
        if not 1 <= self.k <= self.d:
            raise ValueError(f"infeasible config: need 1 <= k <= d, got k={self.k}, d={self.d}")
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.n_contexts < 1 or self.n_actions < 2:
            raise ValueError("need at least one context and two actions")
        if self.B_x <= 0 or self.B_theta <= 0:
            raise ValueError("norm bounds must be positive")
        kind, arg = _parse_profile(self.relevance_profile)
        if kind == "sparse" and not (arg is not None and 1 <= int(arg) <= self.M):
            raise ValueError("sparse(s) needs 1 <= s <= M")
        if kind == "geometric" and not (arg is not None and arg > 0):
            raise ValueError("geometric(r) needs r > 0")

    @property
    def L(self) -> float:
        return self.B_x * self.B_theta


@dataclass(frozen=True, eq=False)
class MultiTaskInstance:
    phi: np.ndarray  # (n_contexts, n_actions, d)
    rho: np.ndarray  # (n_contexts,)
    B_true: np.ndarray  # (d, k), orthonormal columns
    W_true: np.ndarray  # (k, M)
    theta_true: np.ndarray  # (M + 1, d); row M is the target
    nu_true: np.ndarray  # (M,)
    config: InstanceConfig

    def __post_init__(self):
        for f in ("phi", "rho", "B_true", "W_true", "theta_true", "nu_true"):
            object.__setattr__(self, f, _frozen(getattr(self, f)))

    @property
    def d(self) -> int:
        return self.phi.shape[2]

    @property
    def M(self) -> int:
        return self.nu_true.shape[0]

    @property
    def k(self) -> int:
        return self.B_true.shape[1]

    @property
    def n_contexts(self) -> int:
        return self.phi.shape[0]

    @property
    def n_actions(self) -> int:
        return self.phi.shape[1]

    @property
    def target(self) -> int:
        return self.M

    @property
    def theta_target(self) -> np.ndarray:
        return self.theta_true[self.M]

    @property
    def sources(self) -> np.ndarray:
        """Source parameters as columns, shape (d, M)."""
        return self.theta_true[: self.M].T

    def rewards(self, task: int | None = None) -> np.ndarray:
        """True rewards ``phi(s, a) . theta_task`` as an (n_contexts, n_actions) table."""
        task = self.M if task is None else task
        return self.phi @ self.theta_true[task]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA,
            "kind": "instance",
            "config": dataclasses.asdict(self.config),
            "phi": self.phi.tolist(),
            "rho": self.rho.tolist(),
            "B_true": self.B_true.tolist(),
            "W_true": self.W_true.tolist(),
            "theta_true": self.theta_true.tolist(),
            "nu_true": self.nu_true.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "MultiTaskInstance":
        if doc.get("schema") != SCHEMA or doc.get("kind") != "instance":
            raise ValueError("not a duelrank/v1 instance document")
        return cls(
            phi=np.array(doc["phi"], dtype=float).reshape(
                doc["config"]["n_contexts"], doc["config"]["n_actions"], doc["config"]["d"]
            ),
            rho=doc["rho"],
            B_true=np.array(doc["B_true"], dtype=float).reshape(doc["config"]["d"], -1),
            W_true=np.array(doc["W_true"], dtype=float).reshape(-1, doc["config"]["M"]),
            theta_true=doc["theta_true"],
            nu_true=doc["nu_true"],
            config=InstanceConfig(**doc["config"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "MultiTaskInstance":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class ComparisonDataset:
    """Preference records of one task.

    Row ``i`` compares actions ``pairs[i, 0]`` and ``pairs[i, 1]`` in context
    ``contexts[i]``; ``X[i]`` is their feature difference and ``y[i] = 1``
    means the first action won. ``stream`` identifies the random stream the
    records came from, so ``(stream, i)`` is a unique record identifier.
    """

    task: int
    X: np.ndarray
    y: np.ndarray
    contexts: np.ndarray
    pairs: np.ndarray
    stream: tuple = ()

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def record_ids(self) -> set[tuple]:
        return {(self.stream, i) for i in range(self.n)}


def _orthonormal_frame(rng, d, k):
    Q, R = np.linalg.qr(rng.standard_normal((d, k)))
    return Q * np.sign(np.diag(R))


def _relevance(rng, cfg: InstanceConfig) -> np.ndarray:
    kind, arg = _parse_profile(cfg.relevance_profile)
    M = cfg.M
    if kind == "uniform":
        nu = np.ones(M)
    elif kind == "geometric":
        nu = arg ** np.arange(M) * rng.choice([-1.0, 1.0], size=M)
    else:
        nu = np.zeros(M)
        idx = rng.choice(M, size=int(arg), replace=False)
        nu[idx] = rng.choice([-1.0, 1.0], size=int(arg))
    return nu / np.abs(nu).sum()


def generate_instance(cfg: InstanceConfig) -> MultiTaskInstance:
    """Draw a world satisfying the low-rank and boundedness assumptions.

    Deterministic in ``cfg.seed``. Source parameters have norms drawn
    uniformly in ``[0.5, 0.9] * B_theta`` so the truth sits strictly inside
    the estimation ball. Features are drawn uniformly on the sphere of radius
    ``B_x / 2``, so every pairwise difference has norm at most ``B_x``.
    """
    rng = np.random.default_rng(cfg.seed)
    d, k, M = cfg.d, cfg.k, cfg.M
    B = _orthonormal_frame(rng, d, k)
    dirs = rng.standard_normal((k, M))
    dirs /= np.linalg.norm(dirs, axis=0)
    W = dirs * (cfg.B_theta * rng.uniform(0.5, 0.9, size=M))
    sources = B @ W
    nu = _relevance(rng, cfg)
    target = sources @ nu
    tn = np.linalg.norm(target)
    if tn > cfg.B_theta:
        nu = nu * (cfg.B_theta / tn)
        target = sources @ nu

    phi = rng.standard_normal((cfg.n_contexts, cfg.n_actions, d))
    phi *= (cfg.B_x / 2.0) / np.linalg.norm(phi, axis=2, keepdims=True)
    rho = rng.dirichlet(np.ones(cfg.n_contexts))
    theta = np.vstack([sources.T, target[None, :]])
    return MultiTaskInstance(phi=phi, rho=rho, B_true=B, W_true=W, theta_true=theta, nu_true=nu, config=cfg)


def make_instance(phi, theta_sources, nu, rho=None, B_x=None, B_theta=None) -> MultiTaskInstance:
    """Build an instance from explicit features and parameters (for hand-made worlds)."""
    phi = np.asarray(phi, dtype=float)
    S, A, d = phi.shape
    sources = np.atleast_2d(np.asarray(theta_sources, dtype=float))  # (M, d)
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    M = sources.shape[0]
    rho = np.full(S, 1.0 / S) if rho is None else np.asarray(rho, dtype=float)
    U, s, _ = np.linalg.svd(sources.T, full_matrices=False)
    r = max(1, int(np.sum(s > 1e-12 * max(s.max(), 1e-300))))
    B = U[:, :r]
    W = B.T @ sources.T
    target = sources.T @ nu
    diffs = phi[:, :, None, :] - phi[:, None, :, :]
    bx = float(np.linalg.norm(diffs, axis=-1).max()) if B_x is None else B_x
    bt = float(np.linalg.norm(np.vstack([sources, target]), axis=1).max()) if B_theta is None else B_theta
    cfg = InstanceConfig(
        d=d, k=r, M=M, n_contexts=S, n_actions=A,
        B_x=max(bx, 1e-12), B_theta=max(bt, 1e-12), relevance_profile="uniform", seed=0,
    )
    return MultiTaskInstance(
        phi=phi, rho=rho, B_true=B, W_true=W,
        theta_true=np.vstack([sources, target[None, :]]), nu_true=nu, config=cfg,
    )


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, tuple):
        return np.random.SeedSequence(entropy=seed[0], spawn_key=tuple(seed[1:]))
    return np.random.SeedSequence(seed)


def _stream_key(ss: np.random.SeedSequence) -> tuple:
    return (ss.entropy, *ss.spawn_key)


def sample_dataset(inst: MultiTaskInstance, task: int, n: int, seed) -> ComparisonDataset:
    """Draw ``n`` i.i.d. preference records for ``task``.

    Contexts follow ``rho`` for the target and are uniform for the sources.
    The compared pair is a uniform unordered pair of distinct actions shown
    in uniformly random order. ``seed`` may be an int, a SeedSequence, or a
    tuple ``(entropy, *spawn_key)``.
    """
    if not 0 <= task <= inst.M:
        raise ValueError(f"invalid task index {task}; expected 0..{inst.M}")
    if n < 0:
        raise ValueError("n must be nonnegative")
    ss = _seed_sequence(seed)
    rng = np.random.default_rng(ss)
    S, A = inst.n_contexts, inst.n_actions
    if task == inst.M:
        ctx = rng.choice(S, size=n, p=inst.rho)
    else:
        ctx = rng.integers(S, size=n)
    a1 = rng.integers(A, size=n)
    a2 = rng.integers(A - 1, size=n)
    a2 = a2 + (a2 >= a1)
    X = inst.phi[ctx, a1] - inst.phi[ctx, a2]
    t = X @ inst.theta_true[task]
    y = (rng.random(n) < expit(t)).astype(float)
    return ComparisonDataset(
        task=task, X=X, y=y, contexts=ctx, pairs=np.stack([a1, a2], axis=1), stream=_stream_key(ss)
    )


def _design(inst: MultiTaskInstance, task: int):
    """All (probability, feature difference) atoms of the sampling design for ``task``."""
    S, A = inst.n_contexts, inst.n_actions
    p_ctx = inst.rho if task == inst.M else np.full(S, 1.0 / S)
    iu, ju = np.triu_indices(A, k=1)
    X = (inst.phi[:, iu, :] - inst.phi[:, ju, :]).reshape(-1, inst.d)
    p = np.repeat(p_ctx, iu.size) / iu.size
    return p, X


def fisher_matrix(inst: MultiTaskInstance, task: int) -> np.ndarray:
    """Exact Fisher information ``E[mu'(x . theta) x x^T]`` of one task's design."""
    if not 0 <= task <= inst.M:
        raise ValueError(f"invalid task index {task}")
    p, X = _design(inst, task)
    w = p * mu_prime(X @ inst.theta_true[task])
    E = (X * w[:, None]).T @ X
    return 0.5 * (E + E.T)


def mean_source_fisher(inst: MultiTaskInstance) -> np.ndarray:
    return np.mean([fisher_matrix(inst, m) for m in range(inst.M)], axis=0)


def assumption_diagnostics(inst: MultiTaskInstance) -> dict[str, float]:
    """Relative spectra ``C1, C2`` of every task's Fisher matrix against their average."""
    Es = [fisher_matrix(inst, m) for m in range(inst.M + 1)]
    E = np.mean(Es, axis=0)
    w, V = np.linalg.eigh(E)
    if w.min() <= 0:
        return {"C1": 0.0, "C2": float("inf"), "lambda_min_E": float(w.min())}
    Eih = (V / np.sqrt(w)) @ V.T
    lo, hi = [], []
    for Em in Es:
        ev = np.linalg.eigvalsh(Eih @ Em @ Eih)
        lo.append(ev[0])
        hi.append(ev[-1])
    return {"C1": float(min(lo)), "C2": float(max(hi)), "lambda_min_E": float(w.min())}


def min_l1_relevance(inst: MultiTaskInstance) -> np.ndarray:
    """Minimum-l1 coefficients expressing the target as a combination of sources.

    Solved as the linear program ``min 1^T (u + v)`` s.t. ``T (u - v) = theta*``,
    ``u, v >= 0``, then polished by an exact least-squares solve on the
    support so the equality holds to working precision.
    """
    T = inst.sources
    target = inst.theta_target
    M = T.shape[1]
    coef, *_ = np.linalg.lstsq(T, target, rcond=None)
    scale = max(1.0, np.linalg.norm(target))
    if np.linalg.norm(T @ coef - target) > 1e-6 * scale:
        raise ValueError("target outside source span")
    res = linprog(
        np.ones(2 * M), A_eq=np.hstack([T, -T]), b_eq=target, bounds=(0, None), method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"l1 minimization failed: {res.message}")
    nu = res.x[:M] - res.x[M:]
    support = np.abs(nu) > 1e-9 * max(1.0, np.abs(nu).max())
    if support.any():
        sub, *_ = np.linalg.lstsq(T[:, support], target, rcond=None)
        polished = np.zeros(M)
        polished[support] = sub
        if (
            np.linalg.norm(T @ polished - target) <= np.linalg.norm(T @ nu - target)
            and np.abs(polished).sum() <= np.abs(nu).sum() + 1e-9
        ):
            nu = polished
    return nu


def representation_constant(inst: MultiTaskInstance, H: np.ndarray) -> float:
    """Smallest ``C`` such that every unit-H-norm vector in the source span is
    ``sum_m alpha_m theta*_m`` for some ``||alpha||_2 <= C``."""
    try:
        Lc = linalg.cholesky(np.asarray(H, dtype=float), lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("H must be positive definite") from exc
    s = np.linalg.svd(Lc.T @ inst.sources, compute_uv=False)
    nz = s[s > 1e-10 * s.max()]
    return float(1.0 / nz.min())


__all__ = [
    "InstanceConfig",
    "MultiTaskInstance",
    "ComparisonDataset",
    "generate_instance",
    "make_instance",
    "sample_dataset",
    "fisher_matrix",
    "mean_source_fisher",
    "assumption_diagnostics",
    "min_l1_relevance",
    "representation_constant",
    "SCHEMA",
]
