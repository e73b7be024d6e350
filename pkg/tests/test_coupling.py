import numpy as np
import pytest

from conftest import coupled_pair
from hetlb.coupling import CouplingError, coupled_dominance_run
from hetlb.criticality import epsilon_allocation, evaluate_partition
from hetlb.model import ArrivalRateFunction, MembershipMap, StepwiseRateFunction, build_instance
from hetlb.policies import icrd_reserve

EQ = MembershipMap("equispaced")
B2 = [0, 0.5, 1]


def _system(rates, N=10):
    lam = ArrivalRateFunction.constant(0.5)
    return build_instance(N, N, StepwiseRateFunction(B2, B2, rates), lam, EQ, EQ)


def _reservation(P):
    plan = evaluate_partition(P.lam, P.f, B2, B2)
    return icrd_reserve(P, plan, epsilon_allocation(plan.p, plan.lambda_h, plan.mu, plan.v_widths))


def test_identical_systems_stay_identical():
    P = _system([[1.0, 0.4], [0.6, 1.5]])
    out = coupled_dominance_run(P, P, _reservation(P), 50.0, 1)
    assert out.holds and out.n_events > 100
    np.testing.assert_array_equal(out.final_G, out.final_Gprime)


def test_one_faster_cell_keeps_dominance():
    base = np.array([[1.0, 0.4], [0.6, 1.5]])
    P = _system(base)
    G = _system(base + np.array([[0.5, 0], [0, 0]]))
    out = coupled_dominance_run(G, P, _reservation(P), 50.0, 2)
    assert out.holds and out.violations == []


@pytest.mark.parametrize("seed", range(5))
def test_random_refinements_dominate(seed):
    G, P, res = coupled_pair(seed)
    assert coupled_dominance_run(G, P, res, 50.0, seed).holds


def test_independent_departures_break_dominance():
    broken = [not coupled_dominance_run(*coupled_pair(s), 50.0, s, couple_departures=False).holds
              for s in range(5)]
    assert sum(broken) >= 4


def test_violations_are_logged():
    out = coupled_dominance_run(*coupled_pair(0), 100.0, 0, couple_departures=False, max_logged=3)
    assert not out.holds and len(out.violations) == 3
    v = out.violations[0]
    assert set(v) == {"time", "event", "h", "m", "G", "Gprime"}
    assert any(g > q for g, q in zip(v["G"], v["Gprime"]))


def test_rate_order_is_checked():
    base = np.array([[1.0, 0.4], [0.6, 1.5]])
    P = _system(base)
    slower = _system(base - 0.2)
    with pytest.raises(CouplingError, match="rate ordering"):
        coupled_dominance_run(slower, P, _reservation(P), 10.0, 0)
    with pytest.raises(CouplingError, match="size"):
        coupled_dominance_run(_system(base, N=12), P, _reservation(P), 10.0, 0)
