import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from duelrank.policy import (
    MAX_ENUMERATION,
    ConfidenceEllipsoid,
    Policy,
    coverage_coefficient,
    evaluate_suboptimality,
    optimal_actions,
    pessimistic_policy,
    policy_feature,
    policy_value,
    policy_space_size,
    reward_range,
)
from duelrank.tasks import InstanceConfig, generate_instance, make_instance


def _random_view(seed, S=None, A=None, d=None):
    rng = np.random.default_rng(seed)
    S = S or int(rng.integers(1, 5))
    A = A or int(rng.integers(2, 4))
    d = d or int(rng.integers(2, 5))
    phi = rng.normal(size=(S, A, d))
    rho = rng.dirichlet(np.ones(S))
    Q = rng.normal(size=(d, d))
    ell = ConfidenceEllipsoid(rng.normal(size=d), Q @ Q.T + 0.2 * np.eye(d), float(rng.uniform(0, 2)))
    return phi, rho, ell


def _brute_force(phi, rho, ell):
    S, A, _ = phi.shape
    best, arg = -np.inf, None
    for pol in itertools.product(range(A), repeat=S):
        v = rho @ phi[np.arange(S), pol]
        # direct formula with an explicit dense solve
        val = v @ ell.center - ell.radius * np.sqrt(v @ np.linalg.solve(ell.shape, v))
        if val > best + 1e-13:
            best, arg = val, pol
    return np.array(arg), best


def test_ellipsoid_validation():
    with pytest.raises(ValueError, match="positive definite"):
        ConfidenceEllipsoid(np.zeros(2), np.diag([1.0, -1.0]), 1.0)
    with pytest.raises(ValueError):
        ConfidenceEllipsoid(np.zeros(2), np.eye(2), -0.1)


def test_zero_radius_reduces_to_plain_argmax():
    phi, rho, ell = _random_view(3, S=4, A=3, d=3)
    ell0 = ConfidenceEllipsoid(ell.center, ell.shape, 0.0)
    plain = np.argmax(phi @ ell.center, axis=1)
    assert pessimistic_policy((phi, rho), ell0, "exact").action.tolist() == plain.tolist()
    assert pessimistic_policy((phi, rho), ell0, "greedy").action.tolist() == plain.tolist()


@pytest.mark.parametrize("radius", [0.0, 0.5, 3.0, 50.0])
def test_single_context_exact_equals_greedy(radius):
    phi, rho, ell = _random_view(11, S=1, A=6, d=3)
    ell = ConfidenceEllipsoid(ell.center, ell.shape, radius)
    assert pessimistic_policy((phi, rho), ell, "exact").action.tolist() == \
        pessimistic_policy((phi, rho), ell, "greedy").action.tolist()


def test_two_by_two_hand_enumeration():
    phi = np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.5, 0.5], [-1.0, 0.5]]])
    rho = np.array([0.5, 0.5])
    ell = ConfidenceEllipsoid(np.array([1.0, 0.5]), np.eye(2), 1.0)
    values = {}
    for pol in itertools.product(range(2), repeat=2):
        v = 0.5 * phi[0, pol[0]] + 0.5 * phi[1, pol[1]]
        values[pol] = v @ np.array([1.0, 0.5]) - np.linalg.norm(v)
    best = max(values, key=values.get)
    pi = pessimistic_policy((phi, rho), ell, "exact")
    assert tuple(pi.action) == best
    assert pi.method_tag == "exact"
    assert policy_value((phi, rho), ell, pi.action) == pytest.approx(values[best], abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_exact_matches_brute_force(seed):
    phi, rho, ell = _random_view(seed)
    pi = pessimistic_policy((phi, rho), ell, "exact")
    arg, best = _brute_force(phi, rho, ell)
    assert policy_value((phi, rho), ell, pi.action) == pytest.approx(best, abs=1e-12)
    assert policy_value((phi, rho), ell, pi.action) >= policy_value((phi, rho), ell, arg) - 1e-12


def test_lexicographic_tie_break():
    # identical actions everywhere: every policy ties, the first one wins
    phi = np.ones((3, 4, 2))
    ell = ConfidenceEllipsoid(np.array([0.3, -0.1]), np.eye(2), 0.7)
    assert pessimistic_policy((phi, np.full(3, 1 / 3)), ell, "exact").action.tolist() == [0, 0, 0]


def test_exact_uses_blocked_enumeration_for_large_spaces():
    # 4^9 policies forces a split between enumerated tail and iterated head
    phi, rho, ell = _random_view(5, S=9, A=4, d=3)
    pi = pessimistic_policy((phi, rho), ell, "exact")
    # local optimality: no single-context change improves the value
    base = policy_value((phi, rho), ell, pi.action)
    for s in range(9):
        for a in range(4):
            alt = pi.action.copy()
            alt[s] = a
            assert policy_value((phi, rho), ell, alt) <= base + 1e-12


def test_exact_infeasible_space():
    phi, rho, ell = _random_view(1, S=21, A=2, d=2)
    assert policy_space_size(21, 2) > MAX_ENUMERATION
    with pytest.raises(ValueError, match="enumeration infeasible, use greedy"):
        pessimistic_policy((phi, rho), ell, "exact")
    assert pessimistic_policy((phi, rho), ell, "auto").method_tag == "greedy"
    assert pessimistic_policy(_random_view(1, S=3, A=2, d=2)[:2], ell, "auto").method_tag == "exact"


def test_pessimism_soundness_on_boundary():
    phi, rho, ell = _random_view(7, S=3, A=3, d=4)
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(1000, 4))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    # boundary points center + radius * L^{-T} z
    thetas = ell.center + ell.radius * linalg.solve_triangular(ell.chol.T, Z.T, lower=False).T
    assert all(ell.contains(t, tol=1e-9) for t in thetas[:20])
    for pol in itertools.product(range(3), repeat=3):
        v = policy_feature(phi, rho, pol)
        V = policy_value((phi, rho), ell, pol)
        assert np.min(thetas @ v) >= V - 1e-10


def test_boundary_attains_pessimistic_value():
    phi, rho, ell = _random_view(8, S=2, A=2, d=3)
    v = policy_feature(phi, rho, [0, 1])
    w = np.linalg.solve(ell.shape, v)
    theta = ell.center - ell.radius * w / np.sqrt(v @ w)
    assert theta @ v == pytest.approx(policy_value((phi, rho), ell, [0, 1]), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 3), st.floats(0, 3))
def test_value_monotone_in_radius(seed, r1, r2):
    phi, rho, ell = _random_view(seed)
    lo, hi = sorted((r1, r2))
    pol = np.zeros(phi.shape[0], dtype=int)
    v_lo = policy_value((phi, rho), ConfidenceEllipsoid(ell.center, ell.shape, lo), pol)
    v_hi = policy_value((phi, rho), ConfidenceEllipsoid(ell.center, ell.shape, hi), pol)
    assert v_hi <= v_lo + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_exact_dominates_greedy(seed):
    phi, rho, ell = _random_view(seed)
    ve = policy_value((phi, rho), ell, pessimistic_policy((phi, rho), ell, "exact").action)
    vg = policy_value((phi, rho), ell, pessimistic_policy((phi, rho), ell, "greedy").action)
    assert ve >= vg - 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-2, 1e2))
def test_argmax_invariant_under_joint_scaling(seed, c):
    phi, rho, ell = _random_view(seed)
    scaled = ConfidenceEllipsoid(c * ell.center, ell.shape, c * ell.radius)
    assert pessimistic_policy((phi, rho), ell, "exact").action.tolist() == \
        pessimistic_policy((phi, rho), scaled, "exact").action.tolist()


def test_policy_json_round_trip():
    pi = Policy([2, 0, 1], "greedy")
    doc = pi.to_dict()
    assert doc["schema"] == "duelrank/v1"
    assert doc["action"] == {"0": 2, "1": 0, "2": 1}
    back = Policy.from_json(pi.to_json())
    assert back.action.tolist() == [2, 0, 1] and back.method_tag == "greedy"
    with pytest.raises(ValueError):
        Policy.from_dict({**doc, "action": {"0": 1, "2": 0}})
    with pytest.raises(ValueError):
        Policy([0], "random")


def _one_context(rewards):
    # features e_a with theta = rewards give reward table (rewards,)
    A = len(rewards)
    return make_instance(np.eye(A)[None, :, :], np.asarray(rewards)[None, :], [1.0])


def test_suboptimality_of_optimal_policy_is_zero():
    inst = generate_instance(InstanceConfig(d=4, k=2, M=3, n_contexts=10, n_actions=4, seed=2))
    assert evaluate_suboptimality(inst, Policy(optimal_actions(inst), "exact")) == 0.0


def test_suboptimality_direct_subtraction():
    inst = _one_context([1.0, 0.2])
    assert evaluate_suboptimality(inst, Policy([1], "exact")) == pytest.approx(0.8, abs=1e-15)
    assert evaluate_suboptimality(inst, Policy([0], "exact")) == 0.0


def test_suboptimality_degenerate_rewards():
    inst = make_instance(np.ones((4, 3, 2)), [[0.3, 0.1]], [1.0])
    rng = np.random.default_rng(0)
    assert evaluate_suboptimality(inst, Policy(rng.integers(0, 3, 4), "greedy")) == 0.0


def test_suboptimality_rejects_bad_policy():
    inst = _one_context([1.0, 0.2])
    with pytest.raises(ValueError):
        evaluate_suboptimality(inst, Policy([0, 1], "exact"))
    with pytest.raises(ValueError):
        evaluate_suboptimality(inst, Policy([2], "exact"))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_suboptimality_bounds_and_zero_set(seed):
    rng = np.random.default_rng(seed)
    inst = generate_instance(InstanceConfig(d=3, k=2, M=2, n_contexts=5, n_actions=3, seed=seed))
    a = rng.integers(0, 3, 5)
    gap = evaluate_suboptimality(inst, Policy(a, "greedy"))
    assert 0.0 <= gap <= reward_range(inst)
    r = inst.rewards()
    agrees = np.all(r[np.arange(5), a] >= r.max(axis=1) - 1e-15)
    assert (gap == 0.0) == bool(agrees)


def test_coverage_identity_metric():
    inst = generate_instance(InstanceConfig(d=4, k=2, M=3, n_contexts=6, n_actions=3, seed=4))
    v = policy_feature(inst.phi, inst.rho, optimal_actions(inst))
    assert coverage_coefficient(inst, np.eye(4)) == pytest.approx(v @ v, rel=1e-14)


def test_coverage_homogeneity_and_dense_oracle():
    inst = generate_instance(InstanceConfig(d=5, k=2, M=3, n_contexts=8, n_actions=4, seed=9))
    rng = np.random.default_rng(1)
    Q = rng.normal(size=(5, 5))
    H = Q @ Q.T + 0.1 * np.eye(5)
    c = coverage_coefficient(inst, H)
    assert coverage_coefficient(inst, 2 * H) == pytest.approx(c / 2, rel=1e-12)
    v = policy_feature(inst.phi, inst.rho, optimal_actions(inst))
    lu = linalg.lu_factor(H)
    assert c == pytest.approx(v @ linalg.lu_solve(lu, v), rel=1e-10)


def test_coverage_requires_pd():
    inst = generate_instance(InstanceConfig(d=3, k=1, M=2, n_contexts=4, n_actions=2, seed=0))
    with pytest.raises(ValueError, match="positive definite"):
        coverage_coefficient(inst, np.diag([1.0, 1.0, 0.0]))
