"""End-to-end offline preference learning runs and confidence-radius calibration."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .estimators import (
    ConvergenceError,
    EstimateBundle,
    SolverSettings,
    default_lambda,
    information_matrix,
    joint_lowrank_mle,
    single_task_mle,
    subspace_mle,
)
from .policy import (
    ConfidenceEllipsoid,
    coverage_coefficient,
    evaluate_suboptimality,
    pessimistic_policy,
)
from .relevance import (
    LassoProblem,
    active_sample,
    default_beta,
    default_R,
    lasso_relevance,
    uniform_sample,
)
from .tasks import (
    SCHEMA,
    ComparisonDataset,
    InstanceConfig,
    MultiTaskInstance,
    generate_instance,
    mean_source_fisher,
    representation_constant,
    sample_dataset,
)

# phase labels used in the seed schedule
PHASE_KNOWN = 0
PHASE_PRE = 1
PHASE_MAIN = 2


@dataclass(frozen=True)
class AlgorithmParams:
    """Inputs of a run; ``None`` means "resolve the default from the instance".

    ``N`` is the source budget of the known-relevance run and of the second
    phase of the two-phase run; ``n`` is the second-phase target budget.
    ``epsilon=None`` uses ``1/sqrt(N)`` (known relevance) or ``1/sqrt(n)``
    (two-phase), which tracks the estimation error rate so that a single
    calibrated ``alpha`` is meaningful across budgets.
    """

    N: int = 4000
    n: int | None = None
    N_pre_s: int | None = None
    n_pre: int | None = None
    epsilon: float | None = None
    delta: float = 0.1
    alpha: float = 1.0
    lambda_s: float | None = None
    lam: float | None = None
    lambda_pre_s: float | None = None
    lambda_pre: float | None = None
    beta: float | None = None
    R: float | None = None
    nu0: tuple | None = None
    nu: tuple | None = None
    allocation: str = "active"
    policy_mode: str = "auto"
    lambda_from: str = "all"
    settings: SolverSettings = field(default_factory=SolverSettings)
    seed: int = 0

    def __post_init__(self):
        for name in ("N", "n", "N_pre_s", "n_pre"):
            v = getattr(self, name)
            if v is not None and (int(v) != v or v < 1):
                raise ValueError(f"budget {name} must be a positive integer")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 <= self.delta < 1:
            raise ValueError("delta must lie in [0, 1)")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.allocation not in ("active", "uniform"):
            raise ValueError("allocation must be 'active' or 'uniform'")
        if self.policy_mode not in ("auto", "exact", "greedy"):
            raise ValueError("policy_mode must be auto, exact or greedy")
        if self.lambda_from not in ("all", "phase1"):
            raise ValueError("lambda_from must be 'all' or 'phase1'")
        for name in ("lambda_s", "lam", "lambda_pre_s", "lambda_pre", "R"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.nu0 is not None:
            nu0 = np.asarray(self.nu0, dtype=float)
            l1 = np.abs(nu0).sum()
            if l1 == 0 or np.any(nu0 == 0):
                raise ValueError("nu0 entries must all be nonzero")
            object.__setattr__(self, "nu0", tuple(float(v) for v in nu0 / l1))
        if self.nu is not None:
            object.__setattr__(self, "nu", tuple(float(v) for v in self.nu))

    def replace(self, **kw) -> "AlgorithmParams":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        doc = dataclasses.asdict(self)
        for key in ("nu0", "nu"):
            if doc[key] is not None:
                doc[key] = list(doc[key])
        return doc

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "AlgorithmParams":
        doc = dict(doc)
        if "settings" in doc and isinstance(doc["settings"], dict):
            doc["settings"] = SolverSettings(**doc["settings"])
        for key in ("nu0", "nu"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass
class RunReport:
    algorithm: str
    allocations: dict[str, list[int]]
    estimate: EstimateBundle
    err_h: float
    err_2: float
    nu_used: list[float]
    nu_hat: list[float] | None
    nu_l1: float
    policy: Any
    subopt: float
    C_star: float
    C_theta: float
    epsilon: float
    radius: float
    timing: dict[str, float]
    diagnostics: dict[str, Any]
    seeds: dict[str, Any]
    params: dict[str, Any]

    @property
    def policy_mode(self) -> str:
        return self.policy.method_tag

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA,
            "kind": "run_report",
            "algorithm": self.algorithm,
            "allocations": self.allocations,
            "estimate": self.estimate.to_dict(),
            "err_h": self.err_h,
            "err_2": self.err_2,
            "nu_used": list(self.nu_used),
            "nu_hat": None if self.nu_hat is None else list(self.nu_hat),
            "nu_l1": self.nu_l1,
            "policy": self.policy.to_dict(),
            "subopt": self.subopt,
            "C_star": self.C_star,
            "C_theta": self.C_theta,
            "epsilon": self.epsilon,
            "radius": self.radius,
            "timing": self.timing,
            "diagnostics": _jsonable(self.diagnostics),
            "seeds": _jsonable(self.seeds),
            "params": _jsonable(self.params),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


# --------------------------------------------------------------------------
# helpers


def child_seed(seed: int, phase: int, task: int) -> tuple:
    """Seed of the records of ``task`` in ``phase``: a counter-based split of ``seed``."""
    return (int(seed), int(phase), int(task))


def _allocate(N: int, nu, allocation: str, M: int):
    if allocation == "uniform":
        return uniform_sample(N, M)
    return active_sample(N, nu)


def _draw_sources(inst, plan, seed, phase):
    if np.any(plan.n < 1):
        raise ValueError(f"budget {plan.N} leaves a source task without data")
    return [sample_dataset(inst, m, int(plan.n[m]), child_seed(seed, phase, m)) for m in range(inst.M)]


def merge_datasets(a: ComparisonDataset, b: ComparisonDataset) -> ComparisonDataset:
    if a.task != b.task:
        raise ValueError("cannot merge records of different tasks")
    return ComparisonDataset(
        task=a.task,
        X=np.vstack([a.X, b.X]),
        y=np.concatenate([a.y, b.y]),
        contexts=np.concatenate([a.contexts, b.contexts]),
        pairs=np.vstack([a.pairs, b.pairs]),
        stream=(a.stream, b.stream),
    )


def population_metric(inst: MultiTaskInstance, lam: float) -> np.ndarray:
    """``H = mean source Fisher + lam I``, the metric of the reported target error."""
    return mean_source_fisher(inst) + lam * np.eye(inst.d)


def _h_norm(v, H) -> float:
    return float(math.sqrt(max(v @ H @ v, 0.0)))


def _span_basis(theta_hats, tol=1e-8):
    U, s, _ = np.linalg.svd(np.asarray(theta_hats, dtype=float).T, full_matrices=False)
    r = int(np.sum(s > tol * max(s.max(), 1e-300)))
    if r == 0:
        raise ConvergenceError("estimated source parameters are all zero")
    return U[:, :r]


def _finish(inst, algorithm, theta_hat, Lam, lam_metric, params, epsilon, bundle_parts, extra):
    radius = params.alpha * epsilon
    t0 = time.perf_counter()
    ell = ConfidenceEllipsoid(theta_hat, Lam, radius)
    pi = pessimistic_policy(inst, ell, params.policy_mode)
    t_policy = time.perf_counter() - t0
    H = population_metric(inst, lam_metric)
    diff = theta_hat - inst.theta_target
    bundle = EstimateBundle(Lambda=Lam, theta_hat_target=theta_hat, **bundle_parts)
    extra["timing"]["policy_s"] = t_policy
    return RunReport(
        algorithm=algorithm,
        estimate=bundle,
        err_h=_h_norm(diff, H),
        err_2=float(np.linalg.norm(diff)),
        policy=pi,
        subopt=evaluate_suboptimality(inst, pi),
        C_star=coverage_coefficient(inst, H),
        C_theta=representation_constant(inst, H),
        epsilon=float(epsilon),
        radius=float(radius),
        params=params.to_dict(),
        **extra,
    )


# --------------------------------------------------------------------------
# known relevance


def estimate_known(inst: MultiTaskInstance, params: AlgorithmParams):
    """Estimation half of the known-relevance run: ``(theta_hat, Lambda, parts)``."""
    cfg = inst.config
    nu = np.asarray(params.nu if params.nu is not None else inst.nu_true, dtype=float)
    if nu.shape != (inst.M,):
        raise ValueError("relevance vector does not match the number of sources")
    N = int(params.N)
    if N < inst.M:
        raise ValueError("budget smaller than the number of sources")
    t0 = time.perf_counter()
    plan = _allocate(N, nu, params.allocation, inst.M)
    datasets = _draw_sources(inst, plan, params.seed, PHASE_KNOWN)
    lam = params.lam if params.lam is not None else default_lambda(inst.M, N, cfg.B_x, cfg.B_theta, inst.d, inst.k)
    theta_hats, basis, diag = joint_lowrank_mle(
        datasets, lam, inst.k, cfg.B_theta, params.settings, return_diagnostics=True
    )
    theta_hat = nu @ theta_hats
    Lam = information_matrix(datasets, theta_hats, lam, N)
    parts = {
        "plan": plan,
        "nu": nu,
        "lam": lam,
        "theta_hats": theta_hats,
        "basis": basis,
        "datasets": datasets,
        "diag": diag,
        "fit_s": time.perf_counter() - t0,
    }
    return theta_hat, Lam, parts


def run_known(inst: MultiTaskInstance, params: AlgorithmParams) -> RunReport:
    """Known-relevance run: allocate, fit jointly, combine with ``nu``, act pessimistically."""
    t_start = time.perf_counter()
    theta_hat, Lam, p = estimate_known(inst, params)
    epsilon = params.epsilon if params.epsilon is not None else 1.0 / math.sqrt(params.N)
    extra = {
        "allocations": {"sources": p["plan"].tolist()},
        "nu_used": p["nu"].tolist(),
        "nu_hat": None,
        "nu_l1": float(np.abs(p["nu"]).sum()),
        "timing": {"fit_s": p["fit_s"]},
        "diagnostics": {
            "joint_objective": p["diag"]["objective"],
            "restarts": p["diag"]["runs"],
        },
        "seeds": {"master": params.seed, "sources": [list(ds.stream) for ds in p["datasets"]]},
    }
    parts = {"theta_hat": p["theta_hats"], "basis_hat": p["basis"], "lambdas_used": {"lambda": p["lam"]},
             "diagnostics": {"objective": p["diag"]["objective"]}}
    report = _finish(inst, "known", theta_hat, Lam, p["lam"], params, epsilon, parts, extra)
    report.timing["total_s"] = time.perf_counter() - t_start
    return report


# --------------------------------------------------------------------------
# unknown relevance, two phases


def resolve_active_budgets(inst: MultiTaskInstance, params: AlgorithmParams) -> dict[str, int]:
    N_s = int(params.N)
    n = int(params.n) if params.n is not None else max(1, N_s // inst.M)
    N_pre_s = int(params.N_pre_s) if params.N_pre_s is not None else max(inst.M, N_s // 4)
    n_pre = int(params.n_pre) if params.n_pre is not None else n
    return {"N_s": N_s, "n": n, "N_pre_s": N_pre_s, "n_pre": n_pre}


def run_active(inst: MultiTaskInstance, params: AlgorithmParams) -> RunReport:
    """Two-phase run: estimate the relevance on a pilot sample, then reallocate.

    Each phase draws fresh records. When the estimated relevance is exactly
    zero the second phase falls back to the prior for its allocation.
    """
    t_start = time.perf_counter()
    cfg = inst.config
    M, d, k = inst.M, inst.d, inst.k
    b = resolve_active_budgets(inst, params)
    nu0 = np.asarray(params.nu0 if params.nu0 is not None else np.full(M, 1.0 / M), dtype=float)
    if nu0.shape != (M,):
        raise ValueError("prior does not match the number of sources")
    lam_pre_s = params.lambda_pre_s or default_lambda(M, b["N_pre_s"], cfg.B_x, cfg.B_theta, d, k)
    lam_pre = params.lambda_pre or default_lambda(1, b["n_pre"], cfg.B_x, cfg.B_theta, d, d)
    lam_s = params.lambda_s or default_lambda(M, b["N_s"], cfg.B_x, cfg.B_theta, d, k)
    lam = params.lam or default_lambda(1, b["n"], cfg.B_x, cfg.B_theta, k, k)
    lam_min = min(lam_pre_s, lam_pre, lam_s, lam)

    # phase 1: pilot estimate of the relevance
    plan1 = _allocate(b["N_pre_s"], nu0, params.allocation, M)
    src1 = _draw_sources(inst, plan1, params.seed, PHASE_PRE)
    tgt1 = sample_dataset(inst, M, b["n_pre"], child_seed(params.seed, PHASE_PRE, M))
    th1, basis1, diag1 = joint_lowrank_mle(src1, lam_pre_s, k, cfg.B_theta, params.settings, return_diagnostics=True)
    theta_pre = single_task_mle(tgt1, lam_pre, cfg.B_theta, params.settings)
    Lam_pre = information_matrix(src1, th1, lam_min, b["N_pre_s"])
    beta = params.beta if params.beta is not None else default_beta(theta_pre, Lam_pre, M, b["N_pre_s"])
    R = params.R if params.R is not None else default_R(th1, theta_pre, Lam_pre, nu0)
    lasso = LassoProblem(th1, theta_pre, Lam_pre, beta, nu0, R)
    try:
        lres = lasso_relevance(lasso, params.settings, return_result=True)
    except ConvergenceError as exc:
        exc.diagnostics = {**(exc.diagnostics or {}), "phase1": {"allocation": plan1.tolist(), "beta": beta, "R": R}}
        raise
    nu_hat = lres.nu
    fallback = bool(np.all(nu_hat == 0))
    t_phase1 = time.perf_counter() - t_start

    # phase 2: reallocate and fit the target inside the estimated span
    plan2 = _allocate(b["N_s"], nu0 if fallback else nu_hat, params.allocation, M)
    src2 = _draw_sources(inst, plan2, params.seed, PHASE_MAIN)
    tgt2 = sample_dataset(inst, M, b["n"], child_seed(params.seed, PHASE_MAIN, M))
    th2, basis2, diag2 = joint_lowrank_mle(src2, lam_s, k, cfg.B_theta, params.settings, return_diagnostics=True)
    span = _span_basis(th2)
    theta_hat = subspace_mle(tgt2, span, lam, cfg.B_theta, params.settings)
    if params.lambda_from == "phase1":
        Lam = Lam_pre
    else:
        merged = [merge_datasets(a, c) for a, c in zip(src1, src2)]
        Lam = information_matrix(merged, th2, lam_min, b["N_pre_s"] + b["N_s"])
    t_fit = time.perf_counter() - t_start

    epsilon = params.epsilon if params.epsilon is not None else 1.0 / math.sqrt(b["n"])
    lambdas = {"lambda_pre_s": lam_pre_s, "lambda_pre": lam_pre, "lambda_s": lam_s, "lambda": lam, "lambda_min": lam_min}
    extra = {
        "allocations": {"phase1": plan1.tolist(), "phase2": plan2.tolist()},
        "nu_used": nu0.tolist(),
        "nu_hat": nu_hat.tolist(),
        "nu_l1": float(np.abs(nu_hat).sum()),
        "timing": {"phase1_s": t_phase1, "fit_s": t_fit},
        "diagnostics": {
            "budgets": b,
            "phase1": {
                "joint_objective": diag1["objective"],
                "restarts": diag1["runs"],
                "theta_pre": theta_pre.tolist(),
                "beta": beta,
                "R": R,
                "lasso_objective": lres.objective,
                "lasso_iterations": lres.iterations,
                "nu_fallback": fallback,
            },
            "phase2": {"joint_objective": diag2["objective"], "restarts": diag2["runs"], "span_rank": int(span.shape[1])},
            "lambda_from": params.lambda_from,
        },
        "seeds": {
            "master": params.seed,
            "phase1": [list(ds.stream) for ds in src1] + [list(tgt1.stream)],
            "phase2": [list(ds.stream) for ds in src2] + [list(tgt2.stream)],
        },
    }
    parts = {"theta_hat": th2, "basis_hat": basis2, "lambdas_used": lambdas,
             "diagnostics": {"objective": diag2["objective"]}}
    report = _finish(inst, "active", theta_hat, Lam, lam_s, params, epsilon, parts, extra)
    report.timing["total_s"] = time.perf_counter() - t_start
    # kept out of the serialized report; used to audit phase separation
    report.datasets = {"phase1": src1 + [tgt1], "phase2": src2 + [tgt2]}
    return report


# --------------------------------------------------------------------------
# calibration of the confidence radius


def _instance_for(inst_family, rep: int) -> MultiTaskInstance:
    if isinstance(inst_family, MultiTaskInstance):
        return inst_family
    if isinstance(inst_family, InstanceConfig):
        seed = int(np.random.SeedSequence([inst_family.seed, rep]).generate_state(1)[0])
        return generate_instance(dataclasses.replace(inst_family, seed=seed))
    raise TypeError("expected an InstanceConfig or a MultiTaskInstance")


def normalized_errors(inst_family, params: AlgorithmParams, seeds) -> np.ndarray:
    """``||theta_hat - theta*||_Lambda / epsilon`` for each seed of the known-relevance stack.

    A config draws a fresh instance per seed; an instance is reused with
    fresh data only.
    """
    out = []
    for s in seeds:
        inst = _instance_for(inst_family, s)
        p = params.replace(seed=int(s))
        theta_hat, Lam, _ = estimate_known(inst, p)
        eps = p.epsilon if p.epsilon is not None else 1.0 / math.sqrt(p.N)
        diff = theta_hat - inst.theta_target
        out.append(math.sqrt(max(diff @ Lam @ diff, 0.0)) / eps)
    return np.asarray(out)


def alpha_from_errors(errors, delta: float) -> float:
    """Smallest ``alpha`` covering at least ``(1 - delta)`` of the normalized errors."""
    e = np.sort(np.asarray(errors, dtype=float))
    if e.size == 0:
        raise ValueError("no errors to calibrate on")
    j = math.ceil((1.0 - delta) * e.size - 1e-9)
    return float(e[max(j, 1) - 1])


def calibrate_alpha(inst_family, params: AlgorithmParams, reps: int = 100, seed_offset: int = 0) -> float:
    """Empirical ``(1 - delta)`` quantile of the normalized estimation error.

    Seeds ``seed_offset, ..., seed_offset + reps - 1`` are used; keep held-out
    validation seeds disjoint from these.
    """
    if reps < 50:
        raise ValueError("calibration needs reps >= 50")
    errors = normalized_errors(inst_family, params, range(seed_offset, seed_offset + reps))
    return alpha_from_errors(errors, params.delta)


def empirical_coverage(inst_family, params: AlgorithmParams, alpha: float, seeds) -> float:
    """Fraction of seeds whose confidence set ``||theta - theta_hat||_Lambda <= alpha eps`` holds ``theta*``."""
    errors = normalized_errors(inst_family, params, seeds)
    return float(np.mean(errors <= alpha))


__all__ = [
    "AlgorithmParams",
    "RunReport",
    "run_known",
    "run_active",
    "estimate_known",
    "calibrate_alpha",
    "alpha_from_errors",
    "normalized_errors",
    "empirical_coverage",
    "population_metric",
    "resolve_active_budgets",
    "child_seed",
    "merge_datasets",
]
