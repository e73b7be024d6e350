"""Rate functions, membership maps and finite system instances.

A system of size N is generated from three ingredients: a service-rate
surface ``f`` on [0,1)^2, an arrival-rate function ``lam`` on [0,1), and two
membership maps placing dispatchers and servers at coordinates in [0,1).
The rate of a type-i task at server j is ``f(phi1(i), phi2(j))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DENSE_CAP = 10**7
DEFAULT_ENVELOPE_GRID = 16


class ModelError(ValueError):
    """Raised when a rate function, map or instance violates its contract."""


def validate_breaks(breaks: Sequence[float], name: str = "breaks") -> np.ndarray:
    b = np.asarray(breaks, dtype=float)
    if b.ndim != 1 or b.size < 2:
        raise ModelError(f"{name} must list at least two points")
    if b[0] != 0.0 or b[-1] != 1.0:
        raise ModelError(f"{name} must start at 0 and end at 1, got {b[0]}..{b[-1]}")
    if np.any(np.diff(b) <= 0):
        raise ModelError(f"{name} must be strictly increasing (zero-width cells are not allowed)")
    return b


def interval_index(breaks: np.ndarray, x) -> np.ndarray:
    """Index of the half-open interval [b_k, b_{k+1}) containing each x."""
    idx = np.searchsorted(breaks, np.asarray(x, dtype=float), side="right") - 1
    return np.clip(idx, 0, breaks.size - 2)


# --------------------------------------------------------------------------
# rate functions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StepwiseRateFunction:
    """Piecewise-constant rate surface: ``rates[h, m]`` on [w_h, w_h+1) x [v_m, v_m+1)."""

    w_breaks: np.ndarray
    v_breaks: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        w = validate_breaks(self.w_breaks, "w_breaks")
        v = validate_breaks(self.v_breaks, "v_breaks")
        r = np.array(self.rates, dtype=float)
        if r.shape != (w.size - 1, v.size - 1):
            raise ModelError(f"rates has shape {r.shape}, expected {(w.size - 1, v.size - 1)}")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise ModelError("rates must be finite and nonnegative")
        if np.any(r.max(axis=1) <= 0):
            bad = int(np.flatnonzero(r.max(axis=1) <= 0)[0])
            raise ModelError(f"row {bad} of rates has no positive entry")
        r.setflags(write=False)
        w.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "w_breaks", w)
        object.__setattr__(self, "v_breaks", v)
        object.__setattr__(self, "rates", r)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rates.shape

    def __call__(self, x, y):
        return self.rates[interval_index(self.w_breaks, x), interval_index(self.v_breaks, y)]

    def cell_extremes(self, w_breaks: np.ndarray, v_breaks: np.ndarray, reducer) -> np.ndarray:
        """Exact per-cell min or max over an arbitrary grid."""
        out = np.empty((w_breaks.size - 1, v_breaks.size - 1))
        for a in range(w_breaks.size - 1):
            rows = _overlapping(self.w_breaks, w_breaks[a], w_breaks[a + 1])
            for b in range(v_breaks.size - 1):
                cols = _overlapping(self.v_breaks, v_breaks[b], v_breaks[b + 1])
                out[a, b] = reducer(self.rates[np.ix_(rows, cols)])
        return out


def _overlapping(own: np.ndarray, lo: float, hi: float) -> np.ndarray:
    # cells [own_k, own_k+1) intersecting [lo, hi)
    k = np.arange(own.size - 1)
    return k[(own[:-1] < hi) & (own[1:] > lo)]


@dataclass(frozen=True)
class GeneralRateFunction:
    """Arbitrary rate surface given by a vectorised evaluator.

    ``evaluator(x, y)`` must broadcast over numpy arrays. ``lipschitz_bound``
    (Euclidean) enables guaranteed envelope bounds; ``floor_rate`` is the
    declared mu^o, only spot-checked.
    """

    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lipschitz_bound: Optional[float] = None
    floor_rate: float = 0.0
    name: str = "general"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lipschitz_bound is not None and self.lipschitz_bound < 0:
            raise ModelError("lipschitz_bound must be nonnegative")

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.asarray(self.evaluator(x, y), dtype=float)
        shape = np.broadcast(x, y).shape
        if out.shape != shape:
            out = np.broadcast_to(out, shape).copy()
        return out

    def max_sampled_slope(self, n_pairs: int = 2000, seed: int = 0, scale: float = 1e-3) -> float:
        """Largest finite-difference slope over random nearby pairs."""
        rng = np.random.default_rng(seed)
        p = rng.random((n_pairs, 2)) * (1 - scale)
        d = rng.normal(size=(n_pairs, 2))
        d *= scale / np.linalg.norm(d, axis=1, keepdims=True)
        q = np.clip(p + d, 0.0, np.nextafter(1.0, 0.0))
        num = np.abs(self(q[:, 0], q[:, 1]) - self(p[:, 0], p[:, 1]))
        return float(np.max(num / np.linalg.norm(q - p, axis=1)))

    def floor_rate_witnessed(self, n_x: int = 64, n_y: int = 256) -> bool:
        """Check mu^o at sampled task coordinates only (an existential claim)."""
        x = np.arange(n_x) / n_x
        y = np.arange(n_y) / n_y
        vals = self(x[:, None], y[None, :])
        return bool(np.all(vals.max(axis=1) >= self.floor_rate))


RateFunction = StepwiseRateFunction | GeneralRateFunction


def constant_rate(value: float) -> StepwiseRateFunction:
    return StepwiseRateFunction([0.0, 1.0], [0.0, 1.0], [[value]])


def bump_rate_function(base: float, centers, amplitudes, width: float) -> GeneralRateFunction:
    """``base + sum_k a_k exp(-|z - c_k|^2 / width^2)``, with its Lipschitz bound."""
    c = np.asarray(centers, dtype=float).reshape(-1, 2)
    a = np.asarray(amplitudes, dtype=float).reshape(-1)
    if c.shape[0] != a.size:
        raise ModelError("one amplitude per bump centre is required")
    if base < 0 or np.any(a < 0) or width <= 0:
        raise ModelError("bump family needs base >= 0, amplitudes >= 0, width > 0")

    def evaluate(x, y):
        out = np.full(np.broadcast(x, y).shape, float(base))
        for (cx, cy), amp in zip(c, a):
            out = out + amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / width**2)
        return out

    # |grad a exp(-r^2/s^2)| peaks at r = s/sqrt(2) with value a*sqrt(2/e)/s
    lip = float(np.sum(a) * np.sqrt(2.0 / np.e) / width)
    return GeneralRateFunction(
        evaluate,
        lipschitz_bound=lip,
        floor_rate=float(base) if base > 0 else float(np.max(a, initial=0.0)),
        name="bumps",
        params={"base": base, "centers": c.tolist(), "amplitudes": a.tolist(), "width": width},
    )


# --------------------------------------------------------------------------
# arrival rates and membership maps
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ArrivalRateFunction:
    """Either ``slope * x + intercept`` or a step function on ``breaks``."""

    kind: str = "affine"
    slope: float = 0.0
    intercept: float = 1.0
    breaks: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    allow_zero: bool = False  # pure-death runs only

    def __post_init__(self):
        if self.kind == "affine":
            if self.intercept < 0 or self.slope + self.intercept < 0:
                raise ModelError("affine arrival rate must be nonnegative on [0,1)")
        elif self.kind == "stepwise":
            b = validate_breaks(self.breaks, "arrival breaks")
            v = np.asarray(self.values, dtype=float)
            if v.shape != (b.size - 1,) or np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ModelError("stepwise arrival values must be finite, nonnegative, one per interval")
            object.__setattr__(self, "breaks", b)
            object.__setattr__(self, "values", v)
        else:
            raise ModelError(f"unknown arrival kind {self.kind!r}")
        if not (self.total_mass > 0 or (self.allow_zero and self.total_mass == 0)):
            raise ModelError("arrival rate function must have positive total mass")

    @classmethod
    def affine(cls, slope: float, intercept: float = 0.0) -> "ArrivalRateFunction":
        return cls("affine", slope=slope, intercept=intercept)

    @classmethod
    def constant(cls, value: float) -> "ArrivalRateFunction":
        return cls("affine", slope=0.0, intercept=value)

    @classmethod
    def zero(cls) -> "ArrivalRateFunction":
        return cls("affine", slope=0.0, intercept=0.0, allow_zero=True)

    @classmethod
    def stepwise(cls, breaks, values) -> "ArrivalRateFunction":
        return cls("stepwise", breaks=breaks, values=values)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "affine":
            return self.slope * x + self.intercept
        return self.values[interval_index(self.breaks, x)]

    def antiderivative(self, x: float) -> float:
        if self.kind == "affine":
            return 0.5 * self.slope * x * x + self.intercept * x
        b, v = self.breaks, self.values
        k = int(interval_index(b, x))
        return float(np.sum(v[:k] * np.diff(b)[:k]) + v[k] * (x - b[k]))

    @property
    def total_mass(self) -> float:
        return self.antiderivative(1.0)


def integrate_lambda(lam: ArrivalRateFunction, a: float, b: float, xi: float = 1.0) -> float:
    """Closed-form ``(1/xi) * integral_a^b lam(x) dx``."""
    if not (0.0 <= a < b <= 1.0):
        raise ModelError(f"need 0 <= a < b <= 1, got [{a}, {b}]")
    if xi <= 0:
        raise ModelError("xi must be positive")
    return (lam.antiderivative(b) - lam.antiderivative(a)) / xi


@dataclass(frozen=True)
class MembershipMap:
    kind: str = "equispaced"
    seed: Optional[int] = None
    values: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("equispaced", "seeded-uniform", "explicit-list"):
            raise ModelError(f"unknown membership kind {self.kind!r}")
        if self.kind == "seeded-uniform" and self.seed is None:
            raise ModelError("seeded-uniform membership needs a seed")
        if self.kind == "explicit-list":
            vals = np.asarray(self.values, dtype=float)
            if np.any(vals < 0) or np.any(vals >= 1):
                raise ModelError("explicit membership values must lie in [0,1)")
            object.__setattr__(self, "values", tuple(float(v) for v in vals))

    def coords(self, n: int) -> np.ndarray:
        """Coordinates of indices 0..n-1."""
        if self.kind == "equispaced":
            return np.arange(n, dtype=float) / n
        if self.kind == "seeded-uniform":
            # prefix-stable in n, so instances nest as n grows
            return np.random.default_rng(self.seed).random(n)
        if len(self.values) < n:
            raise ModelError(f"explicit membership map has {len(self.values)} values, need {n}")
        return np.asarray(self.values[:n], dtype=float)


# --------------------------------------------------------------------------
# instances
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SystemInstance:
    """One concrete system: W Poisson dispatchers, N exponential servers.

    Rates are stored as ``table[row_key[i], col_key[j]]``. Stepwise surfaces
    use cell indices as keys; general surfaces are stored densely (keys are
    plain indices) unless W*N exceeds the dense cap, in which case ``table``
    is None and rates are evaluated on demand.
    """

    N: int
    W: int
    xi: float
    f: RateFunction
    lam: ArrivalRateFunction
    dispatcher_coords: np.ndarray
    server_coords: np.ndarray
    arrival_rates: np.ndarray
    table: Optional[np.ndarray]
    row_key: Optional[np.ndarray]
    col_key: Optional[np.ndarray]

    @property
    def has_table(self) -> bool:
        return self.table is not None

    def rate(self, i: int, j: int) -> float:
        if self.table is not None:
            return float(self.table[self.row_key[i], self.col_key[j]])
        return float(self.f(self.dispatcher_coords[i], self.server_coords[j]))

    def rate_matrix(self) -> np.ndarray:
        if self.table is not None:
            return self.table[np.ix_(self.row_key, self.col_key)]
        return self.f(self.dispatcher_coords[:, None], self.server_coords[None, :])

    def rate_row(self, i: int) -> np.ndarray:
        if self.table is not None:
            return self.table[self.row_key[i], self.col_key]
        return self.f(np.full(self.N, self.dispatcher_coords[i]), self.server_coords)

    @property
    def total_arrival_rate(self) -> float:
        return float(self.arrival_rates.sum())


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def build_instance(
    N: int,
    W: int,
    f: RateFunction,
    lam: ArrivalRateFunction,
    phi1: MembershipMap,
    phi2: MembershipMap,
    xi: Optional[float] = None,
    dense_cap: int = DEFAULT_DENSE_CAP,
) -> SystemInstance:
    if N < 1 or W < 1:
        raise ModelError("N and W must be positive")
    x = phi1.coords(W)
    y = phi2.coords(N)
    arrivals = np.asarray(lam(x), dtype=float)
    if np.any(arrivals < 0) or not np.all(np.isfinite(arrivals)):
        raise ModelError("arrival rates must be finite and nonnegative")

    if isinstance(f, StepwiseRateFunction):
        row_key = interval_index(f.w_breaks, x).astype(np.int64)
        col_key = interval_index(f.v_breaks, y).astype(np.int64)
        table = np.array(f.rates)
    elif W * N <= dense_cap:
        table = f(x[:, None], y[None, :])
        row_key = np.arange(W, dtype=np.int64)
        col_key = np.arange(N, dtype=np.int64)
    else:
        table = row_key = col_key = None

    if table is not None:
        if not np.all(np.isfinite(table)) or np.any(table < 0):
            raise ModelError("rate function produced a negative or non-finite rate")
        present = np.unique(col_key)
        row_ok = (table[:, present] > 0).any(axis=1)
        starved = np.flatnonzero(~row_ok[row_key])
    else:
        starved = []
        for i in range(W):
            row = f(np.full(N, x[i]), y)
            if not np.all(np.isfinite(row)) or np.any(row < 0):
                raise ModelError("rate function produced a negative or non-finite rate")
            if not np.any(row > 0):
                starved.append(i)
    if len(starved):
        raise ModelError(f"dispatcher {int(starved[0])} has no compatible server")

    return SystemInstance(
        N=N,
        W=W,
        xi=float(W / N if xi is None else xi),
        f=f,
        lam=lam,
        dispatcher_coords=_frozen(x),
        server_coords=_frozen(y),
        arrival_rates=_frozen(arrivals),
        table=None if table is None else _frozen(table),
        row_key=None if row_key is None else _frozen(row_key),
        col_key=None if col_key is None else _frozen(col_key),
    )


@dataclass(frozen=True)
class GroupIndex:
    dispatcher_groups: list
    server_groups: list

    @property
    def empty_dispatcher_groups(self) -> list[int]:
        return [h for h, g in enumerate(self.dispatcher_groups) if g.size == 0]

    @property
    def empty_server_groups(self) -> list[int]:
        return [m for m, g in enumerate(self.server_groups) if g.size == 0]

    def dispatcher_labels(self, W: int) -> np.ndarray:
        out = np.empty(W, dtype=np.int64)
        for h, g in enumerate(self.dispatcher_groups):
            out[g] = h
        return out

    def server_labels(self, N: int) -> np.ndarray:
        out = np.empty(N, dtype=np.int64)
        for m, g in enumerate(self.server_groups):
            out[g] = m
        return out


def group_indices(instance: SystemInstance, w_breaks, v_breaks) -> GroupIndex:
    w = validate_breaks(w_breaks, "w_breaks")
    v = validate_breaks(v_breaks, "v_breaks")
    dl = interval_index(w, instance.dispatcher_coords)
    sl = interval_index(v, instance.server_coords)
    return GroupIndex(
        [np.flatnonzero(dl == h) for h in range(w.size - 1)],
        [np.flatnonzero(sl == m) for m in range(v.size - 1)],
    )


# --------------------------------------------------------------------------
# cell envelopes
# --------------------------------------------------------------------------


def _cell_samples(f: GeneralRateFunction, w: np.ndarray, v: np.ndarray, k: int, reduce):
    t = np.arange(k) / k
    out = np.empty((w.size - 1, v.size - 1))
    for a in range(w.size - 1):
        xs = w[a] + (w[a + 1] - w[a]) * t
        for b in range(v.size - 1):
            ys = v[b] + (v[b + 1] - v[b]) * t
            out[a, b] = reduce(f(xs[:, None], ys[None, :]))
    return out


def _lipschitz_slack(f: GeneralRateFunction, w: np.ndarray, v: np.ndarray, k: int) -> np.ndarray:
    # every point of a cell is within one sample spacing (per axis) of a sample
    diam = np.hypot(np.diff(w)[:, None], np.diff(v)[None, :])
    return f.lipschitz_bound * diam / k


def cell_envelope(
    f: RateFunction,
    w_breaks,
    v_breaks,
    kind: str = "min",
    k: int = DEFAULT_ENVELOPE_GRID,
    use_lipschitz: bool = False,
) -> np.ndarray:
    """Per-cell min (``kind='min'``) or max of ``f`` on the grid.

    Stepwise inputs are exact. General inputs are sampled on a k x k grid of
    cell-relative left points; with ``use_lipschitz`` the estimate is pushed
    outward by ``L * diam / k`` so it bounds the true extremum.
    """
    w = validate_breaks(w_breaks, "w_breaks")
    v = validate_breaks(v_breaks, "v_breaks")
    reducer = np.min if kind == "min" else np.max
    if isinstance(f, StepwiseRateFunction):
        return f.cell_extremes(w, v, reducer)
    est = _cell_samples(f, w, v, k, reducer)
    if use_lipschitz:
        if f.lipschitz_bound is None:
            raise ModelError("use_lipschitz requires a lipschitz_bound on the rate function")
        slack = _lipschitz_slack(f, w, v, k)
        est = np.maximum(est - slack, 0.0) if kind == "min" else est + slack
    return est


def lower_envelope(
    f: RateFunction,
    w_breaks,
    v_breaks,
    k: int = DEFAULT_ENVELOPE_GRID,
    use_lipschitz: bool = False,
) -> StepwiseRateFunction:
    """Stepwise function equal to the per-cell minimum of ``f``."""
    mins = cell_envelope(f, w_breaks, v_breaks, "min", k, use_lipschitz)
    dead = np.flatnonzero(mins.max(axis=1) <= 0)
    if dead.size:
        raise ModelError(f"task band {int(dead[0])} has zero minimum rate in every server cell")
    return StepwiseRateFunction(w_breaks, v_breaks, mins)
