import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from hetlb.criticality import epsilon_allocation, evaluate_partition
from hetlb.model import ArrivalRateFunction, MembershipMap, StepwiseRateFunction, build_instance, constant_rate
from hetlb.policies import (
    PolicyError,
    PolicySpec,
    ReservationShortfall,
    compile_policy,
    icrd_reserve,
    route,
)

EQ = MembershipMap("equispaced")
ONE = ArrivalRateFunction.constant(1.0)


def two_server(rates, W=1):
    f = StepwiseRateFunction([0, 1], [0, 0.5, 1], [list(rates)])
    return build_instance(2, W, f, ONE, EQ, EQ)


def decide(kind, inst, Z, Q=None, i=0, seed=0, **kw):
    spec = PolicySpec(kind, **kw)
    Q = np.zeros(inst.N) if Q is None else Q
    return route(spec, inst, Z, Q, i, np.random.default_rng(seed))


def test_mindrift_equal_rates_prefers_lighter_workload():
    assert decide("mindrift", two_server((1.0, 1.0)), [2, 1], Q=[2.0, 1.0]) == 1


def test_mindrift_uses_ratio():
    assert decide("mindrift", two_server((4.0, 1.0)), [2, 1], Q=[2.0, 1.0]) == 0


def test_jiq_single_idle_server_is_certain():
    inst = build_instance(6, 1, constant_rate(1.0), ONE, EQ, EQ)
    Z = [1, 3, 0, 2, 1, 1]
    assert {decide("jiq", inst, Z, seed=s) for s in range(200)} == {2}


def test_jfiq_picks_fastest_idle_then_shorter_queue():
    inst = two_server((1.0, 2.0))
    assert decide("jfiq", inst, [0, 0]) == 1
    assert decide("jfiq", inst, [0, 1]) == 0
    f = StepwiseRateFunction([0, 1], [0, 0.5, 1], [[2.0, 2.0]])
    same = build_instance(4, 1, f, ONE, EQ, EQ)
    assert {decide("jfiq", same, [3, 1, 2, 4], seed=s) for s in range(50)} == {1}


def test_jfsq_shortest_then_fastest():
    f = StepwiseRateFunction([0, 1], [0, 0.5, 1], [[1.0, 3.0]])
    inst = build_instance(4, 1, f, ONE, EQ, EQ)
    assert decide("jfsq", inst, [1, 2, 1, 1]) in (2, 3)
    assert {decide("jfsq", inst, [1, 2, 1, 1], seed=s) for s in range(50)} == {2, 3}
    assert decide("jfsq", inst, [0, 2, 1, 1]) == 0


def test_pbased_group_frequencies_match_p():
    inst = build_instance(30, 3, constant_rate(1.0), ONE, EQ, EQ)
    p = np.array([[0.2, 0.5, 0.3]])
    spec = PolicySpec.pbased(p, [0, 1], [0, 1 / 3, 2 / 3, 1])
    cp = compile_policy(spec, inst)
    rng = np.random.default_rng(1)
    Z = np.zeros(30, dtype=np.int64)
    Q = np.zeros(30)
    n = 100_000
    groups = np.array([route(spec, inst, Z, Q, 0, rng, cp) for _ in range(n)]) // 10
    counts = np.bincount(groups, minlength=3)
    assert stats.chisquare(counts, n * p[0]).pvalue > 0.001


def test_pbased_stays_in_sampled_group_and_prefers_idle():
    inst = build_instance(8, 1, constant_rate(1.0), ONE, EQ, EQ)
    spec = PolicySpec.pbased([[0.0, 1.0]], [0, 1], [0, 0.5, 1])
    Z = [0, 0, 0, 0, 3, 0, 2, 1]
    assert {decide("pbased", inst, Z, seed=s, p=spec.p, w_breaks=spec.w_breaks, v_breaks=spec.v_breaks)
            for s in range(50)} == {5}
    busy = [0, 0, 0, 0, 1, 1, 1, 1]
    got = {decide("pbased", inst, busy, seed=s, p=spec.p, w_breaks=spec.w_breaks, v_breaks=spec.v_breaks)
           for s in range(200)}
    assert got == {4, 5, 6, 7}


def test_pbased_rejects_empty_or_incompatible_group():
    inst = build_instance(4, 1, constant_rate(1.0), ONE, EQ, MembershipMap("explicit-list", values=(0.1,) * 4))
    with pytest.raises(PolicyError, match="empty"):
        compile_policy(PolicySpec.pbased([[0.5, 0.5]], [0, 1], [0, 0.5, 1]), inst)
    with pytest.raises(PolicyError, match="incompatible"):
        compile_policy(PolicySpec.pbased([[0.5, 0.5]], [0, 1], [0, 0.5, 1]), two_server((1.0, 0.0)))


def test_unknown_policy():
    with pytest.raises(PolicyError):
        PolicySpec("round-robin")


def _reference(N=50):
    rates = np.full((5, 5), 0.3) + np.diag(np.arange(3.0, 8.0) - 0.3)
    br = np.linspace(0, 1, 6)
    f = StepwiseRateFunction(br, br, rates)
    lam = ArrivalRateFunction.affine(5.0)
    inst = build_instance(N, N, f, lam, EQ, EQ)
    plan = evaluate_partition(lam, f, br, br, p=np.eye(5))
    return inst, plan


def test_reserve_single_block_formula():
    inst = build_instance(100, 100, constant_rate(1.0), ArrivalRateFunction.constant(0.5), EQ, EQ)
    plan = evaluate_partition(inst.lam, inst.f, [0, 1], [0, 1], p=[[1.0]])
    res = icrd_reserve(inst, plan, [[0.1]])
    assert res.block_sizes.tolist() == [[60]]
    assert res.unreserved.tolist() == [40]
    # eps = 0 is in Poly(p); sizes fall back to floor(N lambda / mu)
    assert icrd_reserve(inst, plan, [[0.0]]).block_sizes.tolist() == [[50]]


def test_reserve_identity_only_on_diagonal():
    inst, plan = _reference(200)
    res = icrd_reserve(inst, plan, epsilon_allocation(plan.p, plan.lambda_h, plan.mu, plan.v_widths))
    off = res.block_sizes[~np.eye(5, dtype=bool)]
    assert np.all(off == 0) and np.all(np.diag(res.block_sizes) > 0)


def test_reserve_rejects_eps_outside_poly():
    inst = build_instance(3, 3, constant_rate(1.0), ArrivalRateFunction.constant(0.5), EQ, EQ)
    plan = evaluate_partition(inst.lam, inst.f, [0, 1], [0, 1], p=[[1.0]])
    with pytest.raises(PolicyError, match="Poly"):
        icrd_reserve(inst, plan, [[0.6]])


def test_reserve_shortfall_raised_for_crowded_group():
    inst = build_instance(10, 10, constant_rate(1.0), ArrivalRateFunction.constant(0.5), EQ,
                          MembershipMap("explicit-list", values=(0.1,) * 9 + (0.9,)))
    plan = evaluate_partition(inst.lam, inst.f, [0, 1], [0, 0.5, 1], p=[[0.5, 0.5]])
    with pytest.raises(ReservationShortfall, match="shrink eps and retry"):
        icrd_reserve(inst, plan, [[0.1, 0.1]])


def test_icrd_routes_within_own_class():
    inst, plan = _reference(100)
    res = icrd_reserve(inst, plan, epsilon_allocation(plan.p, plan.lambda_h, plan.mu, plan.v_widths))
    spec = PolicySpec.icrd(res)
    cp = compile_policy(spec, inst)
    rng = np.random.default_rng(4)
    Z = rng.integers(0, 2, 100)
    for i in range(100):
        j = route(spec, inst, Z, np.zeros(100), i, rng, cp)
        assert res.server_class[j] == res.dispatcher_group[i]
        assert res.pruned_rate(i, j) > 0


KIND_NAMES = ["random", "jiq", "jfiq", "jfsq", "mindrift", "pbased"]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), kind=st.sampled_from(KIND_NAMES))
def test_route_never_uses_a_zero_rate_edge(seed, kind):
    r = np.random.default_rng(seed)
    rates = np.where(r.random((2, 3)) < 0.4, 0.0, 0.5 + r.random((2, 3)))
    rates[:, 1] = np.maximum(rates[:, 1], 0.7)  # column 1 is universal
    f = StepwiseRateFunction([0, 0.5, 1], [0, 1 / 3, 2 / 3, 1], rates)
    inst = build_instance(12, 6, f, ONE, EQ, EQ)
    kw = {}
    if kind in ("random", "pbased"):
        kw = dict(p=[[0, 1, 0], [0, 1, 0]], w_breaks=[0, 0.5, 1], v_breaks=[0, 1 / 3, 2 / 3, 1])
    Z = r.integers(0, 3, 12)
    Q = Z / (0.5 + r.random(12))
    i = int(r.integers(6))
    j = decide(kind, inst, Z, Q=Q, i=i, seed=seed, **kw)
    assert inst.rate(i, j) > 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), e=st.integers(-6, 6))
def test_mindrift_scale_invariance(seed, e):
    # powers of two scale Q / r exactly, so ties survive the rescaling
    c = 2.0**e
    r = np.random.default_rng(seed)
    rates = 0.5 + r.integers(1, 4, (1, 4)).astype(float)
    Q = r.integers(0, 4, 8).astype(float)
    Z = Q.astype(np.int64)
    br = np.linspace(0, 1, 5)
    a = build_instance(8, 1, StepwiseRateFunction([0, 1], br, rates), ONE, EQ, EQ)
    b = build_instance(8, 1, StepwiseRateFunction([0, 1], br, rates * c), ONE, EQ, EQ)
    for s in range(5):
        assert decide("mindrift", a, Z, Q=Q, seed=s) == decide("mindrift", b, Z, Q=Q * c, seed=s)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), kind=st.sampled_from(KIND_NAMES[1:5]))
def test_route_deterministic_given_stream(seed, kind):
    r = np.random.default_rng(seed)
    inst = build_instance(10, 2, constant_rate(1.0), ONE, EQ, EQ)
    Z = r.integers(0, 2, 10)
    assert decide(kind, inst, Z, Q=Z.astype(float), seed=seed) == decide(kind, inst, Z, Q=Z.astype(float), seed=seed)
