"""Closed-form fluid oracles: transient ODE solutions and fixed points."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .criticality import routing_matrix


class FluidError(ValueError):
    pass


@dataclass(frozen=True)
class FluidParams:
    lambda_p: np.ndarray  # (M, K) arrival mass per unit server by group and rate
    mu_k: np.ndarray  # (K,) distinct service rates, ascending
    x_p: np.ndarray  # (M, K) = lambda_p / mu_k


def lambda_p_matrix(p, lambda_h, mu) -> FluidParams:
    """Aggregate routed arrival mass by server group m and exact service rate mu_k."""
    p = routing_matrix(p)
    lam = np.asarray(lambda_h, dtype=float)
    mu = np.asarray(mu, dtype=float)
    used = p > 0
    if np.any(used & (mu <= 0)):
        raise FluidError("p routes mass to a zero-rate cell")
    mu_k = np.unique(mu[used])
    H, M = p.shape
    lam_p = np.zeros((M, mu_k.size))
    for h, m in zip(*np.nonzero(used)):
        k = int(np.searchsorted(mu_k, mu[h, m]))
        lam_p[m, k] += p[h, m] * lam[h]
    return FluidParams(lam_p, mu_k, lam_p / mu_k[None, :])


def ode_transient(lambda_mk, mu_k, x0, t):
    """x(t) = lambda/mu + (x0 - lambda/mu) exp(-mu t); broadcasts over arrays."""
    mu_k = np.asarray(mu_k, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(mu_k <= 0):
        raise FluidError("service rate must be positive")
    if np.any(t < 0):
        raise FluidError("time must be nonnegative")
    eq = np.asarray(lambda_mk, dtype=float) / mu_k
    out = eq + (np.asarray(x0, dtype=float) - eq) * np.exp(-mu_k * t)
    return float(out) if out.ndim == 0 else out


def icrd_fixed_point(lambda_h, p, mu) -> np.ndarray:
    """Busy fraction of each reserved block at equilibrium: lambda_h p_hm / mu_hm."""
    p = routing_matrix(p)
    mu = np.asarray(mu, dtype=float)
    used = p > 0
    if np.any(used & (mu <= 0)):
        raise FluidError("p routes mass to a zero-rate cell")
    lam = np.asarray(lambda_h, dtype=float)
    return np.where(used, lam[:, None] * p / np.where(used, mu, 1.0), 0.0)


def stolyar_fixed_point(lam: float, mu_j, beta_j, tol: float = 1e-12, max_iter: int = 400) -> np.ndarray:
    """Busy fractions x_j of server pools with rates mu_j and sizes beta_j under JIQ.

    The equalities mu_j x_j / (beta_j - x_j) = c for a common c turn into
    x_j = c beta_j / (mu_j + c), leaving the increasing scalar equation
    g(c) = sum_j mu_j c beta_j / (mu_j + c) = lam, solved by bisection.
    """
    mu = np.asarray(mu_j, dtype=float)
    beta = np.asarray(beta_j, dtype=float)
    if mu.shape != beta.shape or mu.ndim != 1 or mu.size == 0:
        raise FluidError("mu_j and beta_j must be matching nonempty vectors")
    if np.any(mu <= 0) or np.any(beta <= 0):
        raise FluidError("mu_j and beta_j must be positive")
    if lam < 0:
        raise FluidError("arrival rate must be nonnegative")
    if lam >= float(mu @ beta):
        raise FluidError(f"supercritical: lambda={lam} >= sum mu beta = {float(mu @ beta)}")

    def g(c: float) -> float:
        return float(np.sum(mu * c * beta / (mu + c)))

    lo, hi = 0.0, 1.0
    while g(hi) <= lam:
        lo, hi = hi, 2.0 * hi
    c = 0.5 * (lo + hi)
    for _ in range(max_iter):
        c = 0.5 * (lo + hi)
        gc = g(c)
        if abs(gc - lam) <= tol or hi - lo <= np.spacing(hi):
            break
        if gc < lam:
            lo = c
        else:
            hi = c
    return c * beta / (mu + c)


def fluid_rows(params: FluidParams, times, x0=None, label: str = "fluid") -> Iterator[tuple]:
    """ODE curves and fixed points in the simulator's long CSV layout (series, time, m, k)."""
    times = np.asarray(times, dtype=float)
    M, K = params.lambda_p.shape
    x0 = np.zeros((M, K)) if x0 is None else np.asarray(x0, dtype=float)
    for t in times:
        curve = ode_transient(params.lambda_p, params.mu_k[None, :], x0, t)
        for m in range(M):
            for k in range(K):
                yield (label, 0, "ode", float(t), -1, m, -1, k, float(curve[m, k]))
    for m in range(M):
        for k in range(K):
            yield (label, 0, "fixed_point", float(times[-1]) if times.size else 0.0, -1, m, -1, k,
                   float(params.x_p[m, k]))
