import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetlb.fluid import (
    FluidError,
    fluid_rows,
    icrd_fixed_point,
    lambda_p_matrix,
    ode_transient,
    stolyar_fixed_point,
)
from hetlb.simulator import TRACE_COLUMNS


def test_lambda_p_single_rate():
    fp = lambda_p_matrix([[1.0]], [0.5], [[1.0]])
    assert fp.mu_k.tolist() == [1.0]
    assert fp.lambda_p.tolist() == [[0.5]] and fp.x_p.tolist() == [[0.5]]


def test_lambda_p_shared_rate_aggregates():
    fp = lambda_p_matrix([[1.0, 0.0], [0.5, 0.5]], [0.2, 0.4], [[2.0, 1.0], [2.0, 3.0]])
    assert fp.mu_k.tolist() == [2.0, 3.0]
    assert fp.lambda_p[0].tolist() == [pytest.approx(0.4), 0.0]
    assert fp.lambda_p[1].tolist() == [0.0, pytest.approx(0.2)]


def test_lambda_p_identity_diagonal():
    lam = 0.1 * (2 * np.arange(1, 6) - 1)
    mu = np.full((5, 5), 0.3) + np.diag(np.arange(3.0, 8.0) - 0.3)
    fp = lambda_p_matrix(np.eye(5), lam, mu)
    nz = np.argwhere(fp.lambda_p > 0)
    assert all(fp.mu_k[k] == mu[m, m] for m, k in nz)
    assert len(nz) == 5


def test_ode_values():
    assert ode_transient(0.5, 1.0, 0.0, 50.0) == pytest.approx(0.5, abs=1e-15)
    assert ode_transient(0.5, 1.0, 0.0, 1.0) == pytest.approx(0.5 * (1 - math.exp(-1)), abs=1e-15)
    assert ode_transient(0.5, 1.0, 0.0, 1.0) == pytest.approx(0.31606, abs=1e-5)
    assert ode_transient(0.6, 2.0, 0.3, 7.3) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(FluidError):
        ode_transient(0.5, 0.0, 0.0, 1.0)


def test_icrd_fixed_point_cases():
    assert icrd_fixed_point([0.5], [[1.0]], [[2.0]]).tolist() == [[0.25]]
    x = icrd_fixed_point([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [1.0, 4.0]])
    assert x[0, 1] == 0.0 and x[1, 0] == 0.0
    lam = np.array([0.1, 0.3])
    mu = np.array([[3.0, 0.3], [0.3, 4.0]])
    np.testing.assert_allclose(np.diag(icrd_fixed_point(lam, np.eye(2), mu)), lam / np.diag(mu))


def test_stolyar_cases():
    np.testing.assert_allclose(stolyar_fixed_point(0.5, [1.0], [1.0]), [0.5], atol=1e-12)
    np.testing.assert_allclose(stolyar_fixed_point(0.8, [1.0, 1.0], [0.5, 0.5]), [0.4, 0.4], atol=1e-12)
    x = stolyar_fixed_point(0.9, [1.0, 2.0], [0.5, 0.5])
    assert abs(np.dot([1.0, 2.0], x) - 0.9) <= 1e-10
    ratios = np.array([1.0, 2.0]) * x / (0.5 - x)
    assert abs(ratios[0] - ratios[1]) <= 1e-10
    with pytest.raises(FluidError, match="supercritical"):
        stolyar_fixed_point(2.0, [1.0, 2.0], [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_stolyar_balance_and_interior(seed):
    r = np.random.default_rng(seed)
    J = int(r.integers(1, 6))
    mu = 0.2 + 5 * r.random(J)
    beta = r.dirichlet(np.ones(J))
    lam = float(r.uniform(0.01, 0.99) * mu @ beta)
    x = stolyar_fixed_point(lam, mu, beta)
    assert abs(mu @ x - lam) <= 1e-10
    assert np.all(x > 0) and np.all(x < beta)


@settings(max_examples=60, deadline=None)
@given(lam=st.floats(0.01, 5), mu=st.floats(0.1, 5), x0=st.floats(0, 2), t=st.floats(0.01, 10))
def test_ode_satisfies_its_equation(lam, mu, x0, t):
    h = 1e-5
    d = (ode_transient(lam, mu, x0, t + h) - ode_transient(lam, mu, x0, t - h)) / (2 * h)
    assert d == pytest.approx(lam - mu * ode_transient(lam, mu, x0, t), abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(lam=st.floats(0.01, 5), mu=st.floats(0.1, 5))
def test_ode_from_empty_is_monotone_and_bounded(lam, mu):
    x = ode_transient(lam, mu, 0.0, np.linspace(0, 20, 400))
    assert np.all(np.diff(x) >= 0) and np.all(x <= lam / mu)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_fixed_point_mass_matches_routed_load(seed):
    r = np.random.default_rng(seed)
    H, M = int(r.integers(1, 5)), int(r.integers(1, 5))
    mu = r.choice([0.5, 1.0, 2.0, 3.0], size=(H, M))
    p = r.dirichlet(np.ones(M), size=H)
    lam = r.random(H)
    fp = lambda_p_matrix(p, lam, mu)
    np.testing.assert_allclose(fp.x_p.sum(axis=1), (lam[:, None] * p / mu).sum(axis=0), rtol=1e-12, atol=1e-15)


def test_fluid_rows_schema():
    fp = lambda_p_matrix([[1.0]], [0.5], [[1.0]])
    rows = list(fluid_rows(fp, [0.0, 1.0]))
    assert all(len(r) == len(TRACE_COLUMNS) for r in rows)
    assert [r[2] for r in rows] == ["ode", "ode", "fixed_point"]
    assert rows[1][8] == pytest.approx(0.5 * (1 - math.exp(-1)))
