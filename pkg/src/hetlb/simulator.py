"""Exact CTMC simulation of a heterogeneous dispatcher/server system."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional, Sequence

import numpy as np

from . import _engine as eng
from .model import SystemInstance
from .policies import CompiledPolicy, PolicySpec, compile_policy

DEFAULT_L_CAP = 10
DEFAULT_THRESHOLD = 0.5
MAX_EXACT_BUCKETS = 256
TRACE_COLUMNS = ("policy", "replication", "series", "time", "h", "m", "l", "k", "value")


class SimulationError(RuntimeError):
    pass


class InitialState(str, Enum):
    ALL_EMPTY = "all-empty"
    ALL_ONE = "all-one"
    HALF_HALF = "half-half"

    @property
    def code(self) -> int:
        return {"all-empty": 0, "all-one": 1, "half-half": 2}[self.value]


@dataclass
class SimState:
    """Per-server FCFS contents (dispatcher indices, head first) with derived Z and Q."""

    t: float
    Z: np.ndarray
    Q: np.ndarray
    queues: list

    def recompute_Q(self, rate) -> np.ndarray:
        """Weighted queue lengths rebuilt from queue contents; ``rate(i, j)``."""
        return np.array([sum(1.0 / rate(int(i), j) for i in q) for j, q in enumerate(self.queues)])


@dataclass
class Trace:
    policy: str
    seed: int
    N: int
    W: int
    T: float
    times: np.ndarray
    hist: np.ndarray  # (S, B, L_cap+2): servers per block with exactly z tasks, last bin = overflow
    hist_int: np.ndarray  # time integrals of hist from 0
    xbar: np.ndarray  # (S, M, K): busy servers by group and head-of-line rate
    xbar_int: np.ndarray
    in_system: np.ndarray
    in_system_int: np.ndarray
    arrivals: np.ndarray
    departures: np.ndarray
    busy_assignments: np.ndarray
    bad_assignments: np.ndarray
    bucket_assignments: np.ndarray  # (S, K)
    rate_buckets: np.ndarray  # (K,), NaN when rates were aggregated
    block_labels: np.ndarray  # (B, 2): (class h or -1, group m)
    L_cap: int
    threshold: float
    preloaded: int
    n_events: int
    final: SimState
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.xbar.shape[1]

    @property
    def block_sizes(self) -> np.ndarray:
        return self.hist[0].sum(axis=1)

    @staticmethod
    def _tails(h: np.ndarray) -> np.ndarray:
        return np.flip(np.cumsum(np.flip(h, axis=-1), axis=-1), axis=-1)[..., :-1]

    def x_tilde(self) -> np.ndarray:
        """(S, B, L_cap+1): fraction of N in each block with at least l tasks."""
        return self._tails(self.hist) / self.N

    def x_bar(self) -> np.ndarray:
        return self.xbar / self.N

    def avg_queue_length(self) -> np.ndarray:
        return self.in_system / self.N

    def block_index(self, h: int, m: int) -> int:
        hit = np.flatnonzero((self.block_labels[:, 0] == h) & (self.block_labels[:, 1] == m))
        if hit.size == 0:
            raise KeyError((h, m))
        return int(hit[0])


def rate_buckets(table: np.ndarray, max_exact: int = MAX_EXACT_BUCKETS) -> tuple[np.ndarray, np.ndarray]:
    """Distinct positive rates and a same-shape index table (exact equality)."""
    vals = np.unique(table[table > 0])
    if vals.size > max_exact:
        return np.array([np.nan]), np.zeros(table.shape, dtype=np.int64)
    idx = np.clip(np.searchsorted(vals, table), 0, vals.size - 1).astype(np.int64)
    return vals, idx


def _sample_grid(T: float, sample_times) -> np.ndarray:
    if sample_times is None:
        s = np.linspace(0.0, T, 101)
    else:
        s = np.asarray(sample_times, dtype=float)
        if s.size and (np.any(s < 0) or np.any(s > T) or not np.all(np.isfinite(s))):
            raise SimulationError("sample times must lie in [0, T]")
    return np.unique(np.append(s, T))


def simulate(
    instance: SystemInstance,
    policy: PolicySpec,
    T: float,
    seed: int,
    init: InitialState | str = InitialState.ALL_EMPTY,
    sample_times: Optional[Sequence[float]] = None,
    threshold: float = DEFAULT_THRESHOLD,
    L_cap: int = DEFAULT_L_CAP,
    debug: bool = False,
    w_breaks=None,
    v_breaks=None,
    compiled: Optional[CompiledPolicy] = None,
) -> Trace:
    """Run one replication on [0, T]; the horizon T is always among the sample times.

    ``w_breaks``/``v_breaks`` set the reporting groups for policies without a
    partition of their own.
    """
    if not (T > 0 and math.isfinite(T)):
        raise SimulationError("horizon must be positive and finite")
    init = InitialState(init)
    times = _sample_grid(T, sample_times)
    cp = compiled or compile_policy(policy, instance, w_breaks, v_breaks)
    table = np.ascontiguousarray(instance.table, dtype=float)
    if not np.all(np.isfinite(table)) or not np.all(np.isfinite(instance.arrival_rates)):
        raise SimulationError("non-finite rates")
    vals, btab = rate_buckets(table)

    if cp.code == eng.ICRD:
        n_cls = cp.H + 1
        cls = np.where(cp.sclass < 0, cp.H, cp.sclass)
    else:
        n_cls = 1
        cls = np.zeros(instance.N, dtype=np.int64)
    block_of = (cls * cp.M + cp.sgroup).astype(np.int64)
    B = n_cls * cp.M
    labels = np.array([(c if (cp.code == eng.ICRD and c < cp.H) else -1, m)
                       for c in range(n_cls) for m in range(cp.M)], dtype=np.int64)

    stream = policy.rng_stream
    rng = np.random.default_rng(seed if stream == 0 else [seed, stream])
    out = eng.run(
        cp.code, rng, float(T), np.ascontiguousarray(instance.arrival_rates, dtype=float), table,
        np.ascontiguousarray(instance.row_key), np.ascontiguousarray(instance.col_key),
        cp.dgroup, cp.sclass, cp.pcum, cp.pool_of, cp.n_pools, btab, vals.size, cp.sgroup, cp.M,
        block_of, B, int(L_cap), float(threshold), init.code, times, bool(debug), 4,
    )
    s_h, s_hi, s_x, s_xi, s_t, s_ti, s_c, s_b, preloaded, n_events, Z, Q, queues = out
    S, Lw, K = times.size, L_cap + 2, vals.size
    final = SimState(float(T), Z, Q, [queues[j, : Z[j]].copy() for j in range(instance.N)])
    meta = dict(cp.meta)
    meta.update({"init": init.value, "seed": int(seed)})
    return Trace(
        policy=policy.name,
        seed=int(seed),
        N=instance.N,
        W=instance.W,
        T=float(T),
        times=times,
        hist=np.rint(s_h.reshape(S, B, Lw)).astype(np.int64),
        hist_int=s_hi.reshape(S, B, Lw),
        xbar=np.rint(s_x.reshape(S, cp.M, K)).astype(np.int64),
        xbar_int=s_xi.reshape(S, cp.M, K),
        in_system=s_t.astype(np.int64),
        in_system_int=s_ti,
        arrivals=s_c[:, 0],
        departures=s_c[:, 1],
        busy_assignments=s_c[:, 2],
        bad_assignments=s_c[:, 3],
        bucket_assignments=s_b,
        rate_buckets=vals,
        block_labels=labels,
        L_cap=int(L_cap),
        threshold=float(threshold),
        preloaded=int(preloaded),
        n_events=int(n_events),
        final=final,
        meta=meta,
    )


@dataclass
class SteadyState:
    t_start: float
    t_end: float
    x_tilde: np.ndarray  # (B, L_cap+1) time-averaged tail fractions
    x_bar: np.ndarray  # (M, K)
    avg_queue_length: float
    mean_in_system: float
    arrivals: int
    queueing_probability: float
    bad_server_probability: float
    block_labels: np.ndarray
    rate_buckets: np.ndarray

    def flat(self) -> dict:
        out = {
            "t_start": self.t_start,
            "t_end": self.t_end,
            "avg_queue_length": self.avg_queue_length,
            "mean_in_system": self.mean_in_system,
            "arrivals": self.arrivals,
            "queueing_probability": self.queueing_probability,
            "bad_server_probability": self.bad_server_probability,
        }
        for b, (h, m) in enumerate(self.block_labels):
            for l in range(1, min(3, self.x_tilde.shape[1])):
                out[f"x_tilde_h{h}_m{m}_l{l}"] = float(self.x_tilde[b, l])
        return out


def steady_state_estimate(trace: Trace, warmup_fraction: float, threshold: Optional[float] = None) -> SteadyState:
    """Time averages over [warmup * T, T] and assignment ratios over the same window."""
    if not 0 <= warmup_fraction < 1:
        raise SimulationError("warmup_fraction must lie in [0, 1)")
    a = int(np.searchsorted(trace.times, warmup_fraction * trace.T - 1e-12))
    z = trace.times.size - 1
    if a >= z or trace.times[z] <= trace.times[a]:
        raise SimulationError("empty post-warmup window")
    dur = trace.times[z] - trace.times[a]

    tails = Trace._tails(trace.hist_int[z] - trace.hist_int[a]) / dur / trace.N
    xbar = (trace.xbar_int[z] - trace.xbar_int[a]) / dur / trace.N
    mean_in = (trace.in_system_int[z] - trace.in_system_int[a]) / dur
    arrivals = int(trace.arrivals[z] - trace.arrivals[a])
    busy = int(trace.busy_assignments[z] - trace.busy_assignments[a])

    if threshold is None or threshold == trace.threshold:
        bad = int(trace.bad_assignments[z] - trace.bad_assignments[a])
    elif np.all(np.isfinite(trace.rate_buckets)):
        per = trace.bucket_assignments[z] - trace.bucket_assignments[a]
        bad = int(per[trace.rate_buckets < threshold].sum())
    else:
        raise SimulationError("rates were aggregated; rerun with the desired threshold")

    return SteadyState(
        t_start=float(trace.times[a]),
        t_end=float(trace.times[z]),
        x_tilde=tails,
        x_bar=xbar,
        avg_queue_length=float(mean_in / trace.N),
        mean_in_system=float(mean_in),
        arrivals=arrivals,
        queueing_probability=busy / arrivals if arrivals else 0.0,
        bad_server_probability=bad / arrivals if arrivals else 0.0,
        block_labels=trace.block_labels,
        rate_buckets=trace.rate_buckets,
    )


def trace_rows(trace: Trace, replication: int = 0, label: Optional[str] = None) -> Iterator[tuple]:
    """Long-format rows matching TRACE_COLUMNS; -1 marks a field that does not apply."""
    name = label or trace.policy
    xt = trace.x_tilde()
    xb = trace.x_bar()
    aq = trace.avg_queue_length()
    for s, t in enumerate(trace.times):
        t = float(t)
        for b, (h, m) in enumerate(trace.block_labels):
            for l in range(xt.shape[2]):
                yield (name, replication, "x_tilde", t, int(h), int(m), l, -1, float(xt[s, b, l]))
        for m in range(xb.shape[1]):
            for k in range(xb.shape[2]):
                yield (name, replication, "x_bar", t, -1, m, -1, k, float(xb[s, m, k]))
        yield (name, replication, "avg_queue_length", t, -1, -1, -1, -1, float(aq[s]))
        yield (name, replication, "arrivals", t, -1, -1, -1, -1, float(trace.arrivals[s]))
        yield (name, replication, "busy_assignments", t, -1, -1, -1, -1, float(trace.busy_assignments[s]))
        yield (name, replication, "bad_assignments", t, -1, -1, -1, -1, float(trace.bad_assignments[s]))
