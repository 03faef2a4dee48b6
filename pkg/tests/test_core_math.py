import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gatedmeta.core_math import (
    GroupLassoPenalty,
    GroupLayout,
    L1Penalty,
    Schedule,
    ScheduleError,
    ZeroPenalty,
    as_param_vector,
    check_theorem1_conditions,
    gamma_recurrence,
    gradient_mapping,
    group_lasso_value,
    prox_group_lasso,
    prox_l1,
)
from oracles import GroupLassoOracle, l1_prox_grid

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vectors = st.integers(1, 16).flatmap(lambda n: arrays(np.float64, n, elements=finite))


# ---- prox_l1 ---------------------------------------------------------------


def test_prox_l1_examples():
    np.testing.assert_array_equal(prox_l1([3.0, -0.5, 1.0], 1.0), [2.0, 0.0, 0.0])
    np.testing.assert_array_equal(prox_l1([-2.0, 0.2], 0.0), [-2.0, 0.2])


def test_prox_l1_tie_maps_to_zero_without_sign():
    out = prox_l1([1.0, -1.0], 1.0)
    assert np.all(out == 0.0)
    assert not np.any(np.signbit(out))


def test_prox_l1_rejects_negative_threshold():
    with pytest.raises(ValueError):
        prox_l1([1.0], -0.1)


def test_prox_l1_matches_grid_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        v = rng.normal(size=rng.integers(1, 17)) * 3
        tau = rng.uniform(0, 2)
        np.testing.assert_allclose(prox_l1(v, tau), l1_prox_grid(v, tau), atol=1e-6)


@given(vectors, vectors, st.floats(0, 5))
def test_prox_l1_nonexpansive(u, v, tau):
    n = min(u.size, v.size)
    u, v = u[:n], v[:n]
    d = np.linalg.norm(prox_l1(u, tau) - prox_l1(v, tau))
    assert d <= np.linalg.norm(u - v) * (1 + 1e-12) + 1e-12


@given(vectors, st.floats(0, 5))
def test_prox_l1_is_optimal_against_perturbations(v, tau):
    x = prox_l1(v, tau)
    f = lambda z: tau * np.abs(z).sum() + 0.5 * np.sum((z - v) ** 2)
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert f(x) <= f(x + 1e-3 * rng.normal(size=x.size)) + 1e-12


# ---- group lasso ---------------------------------------------------------


def test_group_layout_validation():
    with pytest.raises(ValueError, match="overlap"):
        GroupLayout(((0, 3), (2, 4)))
    with pytest.raises(ValueError):
        GroupLayout(((2, 2),))
    with pytest.raises(ValueError):
        GroupLayout(((0, 2),), weights=(1.0, 2.0))
    lay = GroupLayout.contiguous([2, 3], offset=1)
    assert lay.groups == ((1, 3), (3, 6))
    assert lay.weights == pytest.approx((math.sqrt(2), math.sqrt(3)))
    with pytest.raises(ValueError, match="vector length"):
        prox_group_lasso(np.zeros(5), lay, 1.0)


def test_prox_group_lasso_examples():
    lay = GroupLayout(((0, 2),), weights=(1.0,))
    np.testing.assert_allclose(prox_group_lasso([3.0, 4.0], lay, 1.0), [2.4, 3.2])
    np.testing.assert_array_equal(prox_group_lasso([0.6, 0.8], lay, 1.0), [0.0, 0.0])
    # uncovered coordinates pass through
    lay = GroupLayout(((1, 3),))
    v = np.array([7.0, 0.1, 0.1, -7.0])
    out = prox_group_lasso(v, lay, 10.0)
    np.testing.assert_array_equal(out, [7.0, 0.0, 0.0, -7.0])
    assert v[1] == 0.1  # input untouched


def test_prox_group_lasso_singletons_equal_l1():
    rng = np.random.default_rng(3)
    v = rng.normal(size=9)
    lay = GroupLayout.contiguous([1] * 9)
    np.testing.assert_allclose(prox_group_lasso(v, lay, 0.4), prox_l1(v, 0.4), atol=1e-15)


def test_prox_group_lasso_matches_conic_oracle():
    pytest.importorskip("cvxpy")
    rng = np.random.default_rng(5)
    for _ in range(5):
        n = int(rng.integers(2, 17))
        cuts = np.sort(rng.choice(np.arange(1, n), size=min(n - 1, rng.integers(0, 4)), replace=False))
        sizes = np.diff(np.concatenate([[0], cuts, [n]]))
        lay = GroupLayout.contiguous(sizes)
        oracle = GroupLassoOracle(n, lay.groups, lay.weights)
        for _ in range(8):
            v = rng.normal(size=n) * 2
            s = rng.uniform(0, 1.5)
            np.testing.assert_allclose(prox_group_lasso(v, lay, s), oracle(v, s), atol=1e-6)


def test_group_lasso_value():
    lay = GroupLayout(((0, 2), (2, 3)), weights=(2.0, 1.0))
    assert group_lasso_value([3.0, 4.0, -1.0], lay) == pytest.approx(11.0)


@given(st.integers(1, 16), st.data())
def test_prox_group_lasso_nonexpansive(n, data):
    sizes = []
    left = n
    while left:
        s = data.draw(st.integers(1, left))
        sizes.append(s)
        left -= s
    lay = GroupLayout.contiguous(sizes)
    u = data.draw(arrays(np.float64, n, elements=finite))
    v = data.draw(arrays(np.float64, n, elements=finite))
    c = data.draw(st.floats(0, 5))
    d = np.linalg.norm(prox_group_lasso(u, lay, c) - prox_group_lasso(v, lay, c))
    assert d <= np.linalg.norm(u - v) * (1 + 1e-12) + 1e-12


# ---- penalties and gradient mapping ----------------------------------------


def test_penalty_values_and_prox():
    w = np.array([1.0, -2.0, 3.0])
    assert ZeroPenalty().value(w) == 0.0
    np.testing.assert_array_equal(ZeroPenalty().prox(w, 5.0), w)
    l1 = L1Penalty(0.5, start=1)
    assert l1.value(w) == pytest.approx(2.5)
    np.testing.assert_allclose(l1.prox(w, 2.0), [1.0, -1.0, 2.0])
    gl = GroupLassoPenalty(GroupLayout(((0, 3),), weights=(1.0,)), 0.0)
    assert gl.is_zero
    with pytest.raises(ValueError):
        GroupLassoPenalty(GroupLayout(((0, 3),)), -1.0)


def test_gradient_mapping_without_penalty_is_exact_copy():
    g = np.array([0.1, -3.0, 1e-300])
    q = gradient_mapping(np.ones(3), g, 0.7, ZeroPenalty())
    assert q is not g
    assert np.array_equal(q, g)
    assert np.array_equal(gradient_mapping(np.ones(3), g, 0.7, None), g)


def test_gradient_mapping_rejects_nonpositive_c():
    with pytest.raises(ValueError):
        gradient_mapping(np.ones(2), np.ones(2), 0.0, ZeroPenalty())


def test_gradient_mapping_vanishes_at_stationary_point():
    # minimize 0.5||w - a||^2 + ||w||_1 : solution prox_l1(a, 1); gradient there is w - a
    a = np.array([3.0, 0.5, -2.0])
    w = prox_l1(a, 1.0)
    q = gradient_mapping(w, w - a, 0.5, L1Penalty(1.0))
    np.testing.assert_allclose(q, 0.0, atol=1e-15)


def test_as_param_vector():
    v = as_param_vector([[1, 2], [3, 4]])
    assert v.dtype == np.float64 and v.shape == (4,)
    with pytest.raises(ValueError):
        as_param_vector([1.0, np.nan])


# ---- schedules -------------------------------------------------------------


def test_experiment_schedule_values():
    s = Schedule(lam=0.2, T=800)
    assert s.values(1) == pytest.approx((1.0, 1.0, 1.0, 1.0))
    a, b, e, g = s.values(3)
    assert (a, b, e, g) == pytest.approx((0.5, 1.0, 2.0, 1 / 6))
    with pytest.raises(ValueError):
        s.values(801)


def test_theorem1_schedule_preconditions():
    with pytest.raises(ScheduleError, match="lam > rho"):
        Schedule("theorem1", lam=1.0, rho=1.0, T=5)
    with pytest.raises(ScheduleError):
        Schedule("theorem1", lam=2.0, T=5)
    with pytest.raises(ScheduleError):
        Schedule("unknown")
    s = Schedule("theorem1", lam=2.0, rho=1.0, T=50)
    L = 2.0 / 3.0
    assert s.smoothness == pytest.approx(L)
    assert s.values(1)[1] == pytest.approx(1.0)  # min(1, 0.9/L)
    assert check_theorem1_conditions(s, 1.0).satisfied
    bad = Schedule("theorem1", lam=2.0, rho=1.0, T=5, beta=1.6)
    with pytest.raises(ScheduleError):
        bad.values(1)


def test_condition_checker_reports_first_violation():
    s = Schedule("theorem1", lam=2.0, rho=1.0, T=20, eta_fn=lambda t: 10.0)
    rep = check_theorem1_conditions(s, 1.0)
    assert not rep.satisfied and rep.first_violation == 1
    assert "alpha_t*eta_t" in rep.condition


def test_gamma_recurrence_small():
    np.testing.assert_allclose(gamma_recurrence(4), [1.0, 1 / 3, 1 / 6, 1 / 10], rtol=1e-15)


@given(st.integers(1, 2000))
def test_alpha_over_gamma_sum_identity(T):
    s = Schedule(T=T)
    total = math.fsum(s.values(t)[0] / s.values(t)[3] for t in range(1, T + 1))
    assert total == pytest.approx(1.0 / s.values(T)[3], rel=1e-12)
