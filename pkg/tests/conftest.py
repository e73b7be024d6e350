import itertools

import numpy as np
import pytest


def simplex_grid(M: int, step: float) -> np.ndarray:
    """All points of the (M-1)-simplex on a lattice with the given step."""
    n = int(round(1 / step))
    if M == 1:
        return np.ones((1, 1))
    if M == 2:
        a = np.arange(n + 1) / n
        return np.column_stack([a, 1 - a])
    a, b = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = a + b <= n
    a, b = a[keep] / n, b[keep] / n
    return np.column_stack([a, b, 1 - a - b])


def dual_grid_minimax(lam, mu, widths, step: float = 1e-3) -> float:
    """Brute-force value of min_p max_m load_m via its dual over price vectors y.

    For row-stochastic p the min-max of the bilinear load equals
    max_y sum_h lam_h min_m y_m / (mu_hm w_m); y ranges over a simplex lattice.
    """
    lam = np.asarray(lam, float)
    mu = np.asarray(mu, float)
    w = np.asarray(widths, float)
    Y = simplex_grid(mu.shape[1], step)
    ok = mu > 0
    cost = np.where(ok, 1.0 / np.where(ok, mu, 1.0) / w[None, :], 0.0)  # (H, M)
    per_row = np.min(np.where(ok[None], Y[:, None, :] * cost[None, :, :], np.inf), axis=2)
    return float(np.max(per_row @ lam))


def primal_grid_minimax(lam, mu, widths, step: float) -> float:
    """Exhaustive search over row-stochastic p lattices (only for tiny H, M)."""
    lam = np.asarray(lam, float)
    mu = np.asarray(mu, float)
    w = np.asarray(widths, float)
    rows = simplex_grid(mu.shape[1], step)
    best = np.inf
    for combo in itertools.product(range(rows.shape[0]), repeat=mu.shape[0]):
        p = rows[list(combo)]
        if np.any((p > 0) & (mu <= 0)):
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            load = np.where(p > 0, lam[:, None] * p / np.where(mu > 0, mu, 1.0), 0.0).sum(axis=0) / w
        best = min(best, load.max())
    return float(best)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def coupled_pair(seed: int, N=None, bump: float = 0.5):
    """Random 2x2 envelope system G' and a 4x4 refinement G >= G' with random bumps."""
    from hetlb.criticality import epsilon_allocation, evaluate_partition
    from hetlb.model import ArrivalRateFunction, MembershipMap, StepwiseRateFunction, build_instance, lower_envelope
    from hetlb.policies import icrd_reserve

    r = np.random.default_rng(seed)
    b2 = np.array([0, 0.5, 1])
    b4 = np.linspace(0, 1, 5)
    base = 0.5 + 1.5 * r.random((2, 2))
    fine = np.kron(base, np.ones((2, 2))) + bump * r.random((4, 4)) * (r.random((4, 4)) < 0.5)
    fG = StepwiseRateFunction(b4, b4, fine)
    fP = lower_envelope(fG, b2, b2)
    lam = ArrivalRateFunction.constant(0.3 + 0.4 * r.random())
    N = int(r.integers(10, 21)) if N is None else N
    eq = MembershipMap("equispaced")
    G = build_instance(N, N, fG, lam, eq, eq)
    P = build_instance(N, N, fP, lam, eq, eq)
    plan = evaluate_partition(lam, fP, b2, b2)
    res = icrd_reserve(P, plan, epsilon_allocation(plan.p, plan.lambda_h, plan.mu, plan.v_widths))
    return G, P, res


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
