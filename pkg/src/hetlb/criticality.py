"""Per-type loads, the min-max routing LP, slack allocation and partition search."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    ArrivalRateFunction,
    GeneralRateFunction,
    RateFunction,
    StepwiseRateFunction,
    cell_envelope,
    integrate_lambda,
    validate_breaks,
)
from .simplex import LPInfeasible, solve_lp

log = logging.getLogger(__name__)

ROW_TOL = 1e-9
POLY_TOL = 1e-9
SAFETY = 0.99
HEAVY_LOAD_MESSAGE = "Some servers suffer from heavy workload"

SUBCRITICAL = "subcritical"
HEAVY_LOAD = "heavy-load"
UNDECIDED = "undecided"


class CriticalityError(ValueError):
    pass


def routing_matrix(p) -> np.ndarray:
    """Validate a row-stochastic routing matrix and return it as an array."""
    p = np.array(p, dtype=float)
    if p.ndim != 2:
        raise CriticalityError("routing matrix must be two-dimensional")
    if np.any(p < 0) or np.any(p > 1 + ROW_TOL):
        raise CriticalityError("routing probabilities must lie in [0,1]")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_TOL):
        raise CriticalityError("routing matrix rows must sum to 1")
    return p


def load_per_type(lambda_h, mu, v_widths, p) -> np.ndarray:
    """rho_m = sum_h lambda_h p_hm / (mu_hm width_m); unused cells contribute 0."""
    lam = np.asarray(lambda_h, dtype=float)
    mu = np.asarray(mu, dtype=float)
    widths = np.asarray(v_widths, dtype=float)
    p = np.asarray(p, dtype=float)
    used = p > 0
    if np.any(used & (mu <= 0)):
        h, m = np.argwhere(used & (mu <= 0))[0]
        raise CriticalityError(f"p routes type {h} to incompatible server type {m}")
    if np.any(widths <= 0):
        raise CriticalityError("server type widths must be positive")
    safe_mu = np.where(used, mu, 1.0)
    terms = np.where(used, lam[:, None] * p / safe_mu, 0.0)
    return terms.sum(axis=0) / widths


def _routing_lp(lam, mu, widths, tol, rho_cap=None):
    H, M = mu.shape
    cells = np.argwhere(mu > 0)
    nv = len(cells)
    coef = np.array([lam[h] / (mu[h, m] * widths[m]) for h, m in cells])
    if rho_cap is None:
        # min rho: sum_h c p - rho + s_m = 0
        n_cols = nv + 1 + M
        A = np.zeros((H + M, n_cols))
        b = np.zeros(H + M)
        for k, (h, m) in enumerate(cells):
            A[h, k] = 1.0
            A[H + m, k] = coef[k]
        b[:H] = 1.0
        A[H:, nv] = -1.0
        A[H:, nv + 1 :] = np.eye(M)
    else:
        # min t: loads <= rho_cap, p_hm - t + s_hm = 0 (spreads mass among optimal p)
        n_cols = nv + 1 + M + nv
        A = np.zeros((H + M + nv, n_cols))
        b = np.zeros(H + M + nv)
        for k, (h, m) in enumerate(cells):
            A[h, k] = 1.0
            A[H + m, k] = coef[k]
            A[H + M + k, k] = 1.0
        b[:H] = 1.0
        b[H : H + M] = rho_cap
        A[H : H + M, nv + 1 : nv + 1 + M] = np.eye(M)
        A[H + M :, nv] = -1.0
        A[H + M :, nv + 1 + M :] = np.eye(nv)
    c = np.zeros(n_cols)
    c[nv] = 1.0
    res = solve_lp(c, A, b, tol=tol)
    p = np.zeros((H, M))
    for k, (h, m) in enumerate(cells):
        p[h, m] = res.x[k]
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=1, keepdims=True)


def solve_minimax_routing(lambda_h, mu, v_widths, tol: float = 1e-9, spread: bool = True) -> tuple[float, np.ndarray]:
    """Minimise max_m rho_m(p) over row-stochastic p with p=0 on zero-rate cells.

    With ``spread`` a second LP picks, among optimal routings, one minimising
    the largest entry of p, so symmetric instances get symmetric answers.
    """
    lam = np.asarray(lambda_h, dtype=float)
    mu = np.asarray(mu, dtype=float)
    widths = np.asarray(v_widths, dtype=float)
    if np.any(lam < 0):
        raise CriticalityError("arrival masses must be nonnegative")
    if np.any(mu.max(axis=1) <= 0):
        raise CriticalityError(f"type {int(np.argmin(mu.max(axis=1)))} has no compatible server type")
    try:
        p = _routing_lp(lam, mu, widths, tol)
        rho = float(load_per_type(lam, mu, widths, p).max())
        if spread:
            cap = rho + 1e-10 * max(1.0, rho)
            p2 = _routing_lp(lam, mu, widths, tol, rho_cap=cap)
            rho2 = float(load_per_type(lam, mu, widths, p2).max())
            if rho2 <= cap:
                p, rho = p2, rho2
    except LPInfeasible as exc:  # pragma: no cover - excluded by the row check
        raise CriticalityError("routing LP infeasible") from exc
    return rho, p


# --------------------------------------------------------------------------
# slack allocation inside Poly(p)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EpsilonAllocation:
    eps: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.eps, dtype=dtype)


def capacity_slack(p, lambda_h, mu, v_widths) -> np.ndarray:
    """eps*_m = width_m - sum_h lambda_h p_hm / mu_hm."""
    widths = np.asarray(v_widths, dtype=float)
    return widths - load_per_type(lambda_h, mu, widths, p) * widths


def epsilon_allocation(p, lambda_h, mu, v_widths, safety: float = SAFETY) -> EpsilonAllocation:
    """Largest row-proportional slack, shrunk by ``safety``.

    Row h gets eps_h = alpha_h p_h with alpha_h = safety * min over used
    columns of eps*_m / sum_h' p_h'm, which keeps every column within its
    capacity slack.
    """
    p = routing_matrix(p)
    star = capacity_slack(p, lambda_h, mu, v_widths)
    colsum = p.sum(axis=0)
    used = colsum > 0
    if np.any(star[used] <= 0) or np.any(star < 0):
        m = int(np.flatnonzero((star <= 0) & used)[0]) if np.any((star <= 0) & used) else int(np.argmin(star))
        raise CriticalityError(f"routing is not subcritical: server type {m} has slack {star[m]:.3g}")
    per_col = np.where(used, star / np.where(used, colsum, 1.0), np.inf)
    alpha = np.array([safety * per_col[p[h] > 0].min() for h in range(p.shape[0])])
    return EpsilonAllocation(alpha[:, None] * p)


def check_poly_membership(eps, p, lambda_h, mu, v_widths, tol: float = POLY_TOL) -> bool:
    eps = np.asarray(eps, dtype=float)
    p = np.asarray(p, dtype=float)
    if eps.shape != p.shape:
        raise CriticalityError("eps and p shapes differ")
    if np.any(eps < -tol) or np.any(eps >= 1):
        return False
    alpha = eps.sum(axis=1)  # rows of p sum to 1
    if np.any(np.abs(eps - alpha[:, None] * p) > tol):
        return False
    star = capacity_slack(p, lambda_h, mu, v_widths)
    return bool(np.all(eps.sum(axis=0) <= star + tol))


# --------------------------------------------------------------------------
# partition plans
# --------------------------------------------------------------------------


@dataclass
class PartitionPlan:
    w_breaks: np.ndarray
    v_breaks: np.ndarray
    p: Optional[np.ndarray]
    rho_per_type: Optional[np.ndarray]
    rho_max: float
    verdict: str
    lambda_h: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None  # per-cell minimum rate used for the loads
    n: Optional[int] = None
    rho_bar: Optional[float] = None
    history: list = field(default_factory=list)
    message: str = ""
    xi: float = 1.0

    @property
    def v_widths(self) -> np.ndarray:
        return np.diff(self.v_breaks)

    @property
    def H(self) -> int:
        return self.w_breaks.size - 1

    @property
    def M(self) -> int:
        return self.v_breaks.size - 1

    def to_record(self) -> dict:
        return {
            "n": self.n,
            "rho_bar": self.rho_bar,
            "rho": self.rho_max,
            "verdict": self.verdict,
            "w_breaks": [float(x) for x in self.w_breaks],
            "v_breaks": [float(x) for x in self.v_breaks],
            "p": [] if self.p is None else [float(x) for x in self.p.ravel()],
        }


def arrival_masses(lam: ArrivalRateFunction, w_breaks, xi: float = 1.0) -> np.ndarray:
    w = validate_breaks(w_breaks, "w_breaks")
    return np.array([integrate_lambda(lam, w[h], w[h + 1], xi) for h in range(w.size - 1)])


def evaluate_partition(
    lam: ArrivalRateFunction,
    f: RateFunction,
    w_breaks,
    v_breaks,
    p=None,
    xi: float = 1.0,
    grid: int = 16,
    use_lipschitz: bool = False,
) -> PartitionPlan:
    """Loads of a given (w, v, p); ``p=None`` picks the min-max routing."""
    w = validate_breaks(w_breaks, "w_breaks")
    v = validate_breaks(v_breaks, "v_breaks")
    lam_h = arrival_masses(lam, w, xi)
    mu = cell_envelope(f, w, v, "min", grid, use_lipschitz)
    if p is None:
        if np.any(mu.max(axis=1) <= 0):
            return PartitionPlan(w, v, None, None, np.inf, HEAVY_LOAD, lam_h, mu, xi=xi,
                                 message="a task band has no positive minimum rate")
        _, p = solve_minimax_routing(lam_h, mu, np.diff(v))
    p = routing_matrix(p)
    rho = load_per_type(lam_h, mu, np.diff(v), p)
    rho_max = float(rho.max())
    verdict = SUBCRITICAL if rho_max < 1 else HEAVY_LOAD
    return PartitionPlan(w, v, p, rho, rho_max, verdict, lam_h, mu, xi=xi)


def _dyadic_extremes(f: RateFunction, n: int, lattice: Optional[np.ndarray], G: int, slack: float):
    breaks = np.arange(2**n + 1) / 2**n
    if isinstance(f, StepwiseRateFunction):
        return f.cell_extremes(breaks, breaks, np.min), f.cell_extremes(breaks, breaks, np.max)
    k = G // 2**n
    blocks = lattice.reshape(2**n, k, 2**n, k)
    lo = blocks.min(axis=(1, 3)) - slack
    hi = blocks.max(axis=(1, 3)) + slack
    return np.maximum(lo, 0.0), hi


def _level_lp(lam_h, mu, widths) -> tuple[float, Optional[np.ndarray]]:
    # a task band with no positive rate leaves the polyhedron empty
    if np.any(mu.max(axis=1) <= 0):
        return np.inf, None
    return solve_minimax_routing(lam_h, mu, widths, spread=False)


@dataclass
class Level:
    n: int
    breaks: np.ndarray
    lambda_h: np.ndarray
    mu_min: np.ndarray
    mu_max: np.ndarray
    rho_bar: float
    rho: float
    p: Optional[np.ndarray]


def refinement_levels(
    lam: ArrivalRateFunction,
    f: RateFunction,
    n_max: int,
    xi: float = 1.0,
    grid: int = 16,
    use_lipschitz: bool = False,
    size_cap: int = 2**10,
    lattice_cap: int = 2048,
):
    """Yield the optimistic and certified LP optima on dyadic grids n = 1..n_max.

    At level n the unit square is cut into 2^n x 2^n cells. ``rho_bar`` uses
    per-cell maximum rates and ``rho`` per-cell minimum rates. General surfaces
    are sampled on one shared lattice so that refining a cell only ever
    restricts its sample set, which keeps both sequences monotone in n.
    """
    if n_max < 1:
        raise CriticalityError("n_max must be at least 1")
    if 2**n_max > size_cap:
        raise CriticalityError(f"2^{n_max} cells per axis exceeds the size cap {size_cap}")

    lattice = None
    G = 0
    slack = 0.0
    if isinstance(f, GeneralRateFunction):
        per_cell = max(1, min(grid, lattice_cap // 2**n_max))
        G = 2**n_max * per_cell
        pts = np.arange(G) / G
        lattice = f(pts[:, None], pts[None, :])
        if use_lipschitz:
            if f.lipschitz_bound is None:
                raise CriticalityError("use_lipschitz requires a lipschitz_bound")
            slack = f.lipschitz_bound * np.sqrt(2.0) / G

    for n in range(1, n_max + 1):
        breaks = np.arange(2**n + 1) / 2**n
        widths = np.diff(breaks)
        lam_h = arrival_masses(lam, breaks, xi)
        mu_lo, mu_hi = _dyadic_extremes(f, n, lattice, G, slack)
        rho_bar, _ = _level_lp(lam_h, mu_hi, widths)
        rho, p = _level_lp(lam_h, mu_lo, widths)
        log.debug("level %d: rho_bar=%.6g rho=%.6g", n, rho_bar, rho)
        yield Level(n, breaks, lam_h, mu_lo, mu_hi, rho_bar, rho, p)


def find_subcritical(
    lam: ArrivalRateFunction,
    f: RateFunction,
    rho_star: float,
    n_max: int,
    xi: float = 1.0,
    grid: int = 16,
    use_lipschitz: bool = False,
    size_cap: int = 2**10,
) -> PartitionPlan:
    """Dyadic refinement search for a partition whose certified load is below ``rho_star``."""
    if not 0 < rho_star < 1:
        raise CriticalityError("rho_star must lie in (0, 1)")
    history = []
    last = None
    for lv in refinement_levels(lam, f, n_max, xi, grid, use_lipschitz, size_cap):
        history.append({"n": lv.n, "rho_bar": lv.rho_bar, "rho": lv.rho})
        last = lv
        if lv.rho_bar >= rho_star:
            return PartitionPlan(lv.breaks, lv.breaks, None, None, lv.rho, HEAVY_LOAD, lv.lambda_h,
                                 lv.mu_min, n=lv.n, rho_bar=lv.rho_bar, history=history,
                                 message=HEAVY_LOAD_MESSAGE, xi=xi)
        if lv.rho < rho_star:
            widths = np.diff(lv.breaks)
            _, p = solve_minimax_routing(lv.lambda_h, lv.mu_min, widths)
            loads = load_per_type(lv.lambda_h, lv.mu_min, widths, p)
            return PartitionPlan(lv.breaks, lv.breaks, p, loads, float(loads.max()), SUBCRITICAL,
                                 lv.lambda_h, lv.mu_min, n=lv.n, rho_bar=lv.rho_bar,
                                 history=history, xi=xi)

    msg = (f"rho_bar={last.rho_bar:.6g} < rho*={rho_star} <= rho={last.rho:.6g} "
           f"after n_max={n_max} levels")
    return PartitionPlan(last.breaks, last.breaks, None, None, last.rho, UNDECIDED, last.lambda_h,
                         last.mu_min, n=n_max, rho_bar=last.rho_bar, history=history,
                         message=msg, xi=xi)
