"""Experiment drivers behind the CLI subcommands.

Each driver returns a ``RunOutput``: an exit code, a result table for the
report, rows for summary.csv and rows for traces.csv. Replications use seeds
``seed, seed+1, ...`` and the same seeds for every policy and initial state.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    build_arrival,
    build_rate,
    instance_size,
    make_instance,
    make_policy,
    reporting_breaks,
    membership,
    reservation_for,
    resolve_plan,
    xi_of,
)
from .coupling import coupled_dominance_run
from .criticality import HEAVY_LOAD, SUBCRITICAL, UNDECIDED, find_subcritical
from .fluid import fluid_rows, lambda_p_matrix
from .model import build_instance, lower_envelope
from .policies import compile_policy
from .simulator import Trace, simulate, steady_state_estimate, trace_rows

EXIT_OK, EXIT_CONFIG, EXIT_HEAVY, EXIT_RUNTIME, EXIT_UNDECIDED = 0, 2, 3, 4, 5
VERDICT_EXIT = {SUBCRITICAL: EXIT_OK, HEAVY_LOAD: EXIT_HEAVY, UNDECIDED: EXIT_UNDECIDED}
END_WINDOW = 0.1


@dataclass
class RunOutput:
    command: str
    exit_code: int
    result: dict
    summary: list = field(default_factory=list)
    traces: list = field(default_factory=list)
    seeds: list = field(default_factory=list)


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error; the error is 0 for a single replication."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def seeds_for(cfg: ExperimentConfig, replications: int) -> list[int]:
    base = int(cfg.section("run")["seed"])
    return [base + r for r in range(replications)]


# --------------------------------------------------------------------------
# replication fan-out
# --------------------------------------------------------------------------


@lru_cache(maxsize=16)
def _setup(cfg_json: str, N: int, policy: str):
    cfg = ExperimentConfig(json.loads(cfg_json), "<resolved config>")
    instance = make_instance(cfg, N)
    spec = make_policy(cfg, policy, instance)
    w, v = reporting_breaks(cfg)
    return instance, spec, compile_policy(spec, instance, w, v)


def _one(job: tuple) -> Trace:
    cfg_json, N, policy, seed, init, horizon, dt = job
    instance, spec, compiled = _setup(cfg_json, N, policy)
    run = json.loads(cfg_json)["run"]
    times = np.arange(0.0, horizon + 1e-9, dt)
    times = times[times <= horizon]
    return simulate(instance, spec, horizon, seed, init=init, sample_times=times,
                    threshold=float(run["threshold"]), L_cap=int(run["L_cap"]),
                    debug=bool(run["debug"]), compiled=compiled)


def run_jobs(cfg: ExperimentConfig, jobs: list[tuple]) -> list[Trace]:
    """jobs: (N, policy, seed, init, horizon, sample_dt); order of results follows jobs."""
    cfg_json = json.dumps(cfg.data, sort_keys=True)
    # fail fast on configuration problems before spawning workers
    for N, policy in sorted({(j[0], j[1]) for j in jobs}):
        _setup(cfg_json, N, policy)
    payload = [(cfg_json, *j) for j in jobs]
    workers = int(cfg.section("run")["workers"]) or (os.cpu_count() or 1)
    workers = min(workers, len(payload))
    if workers <= 1:
        return [_one(p) for p in payload]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_one, payload))


def _export_rows(cfg: ExperimentConfig, trace: Trace, rep: int, label: str) -> list:
    levels = int(cfg.section("run")["export_levels"])
    return [r for r in trace_rows(trace, rep, label) if r[2] != "x_tilde" or r[6] < levels]


def _end_queue_length(trace: Trace) -> float:
    # at least one sample interval, even on a coarse grid
    frac = min(1.0 - END_WINDOW, float(trace.times[-2]) / trace.T)
    ss = steady_state_estimate(trace, frac)
    return ss.avg_queue_length


# --------------------------------------------------------------------------
# drivers
# --------------------------------------------------------------------------


def run_check(cfg: ExperimentConfig) -> RunOutput:
    chk = cfg.section("check")
    plan = find_subcritical(build_arrival(cfg), build_rate(cfg), float(chk["rho_star"]), int(chk["n_max"]),
                            xi=xi_of(cfg), grid=int(chk["grid"]), use_lipschitz=bool(chk["use_lipschitz"]))
    result = plan.to_record()
    result["message"] = plan.message
    result["history"] = plan.history
    if plan.rho_per_type is not None:
        result["rho_per_type"] = [float(x) for x in plan.rho_per_type]
    summary = [dict(h, verdict="") for h in plan.history]
    if summary:
        summary[-1]["verdict"] = plan.verdict
    return RunOutput("check", VERDICT_EXIT[plan.verdict], result, summary)


def run_reserve(cfg: ExperimentConfig) -> RunOutput:
    plan = resolve_plan(cfg)
    if plan.verdict != SUBCRITICAL:
        return RunOutput("reserve", VERDICT_EXIT[plan.verdict],
                         {"verdict": plan.verdict, "rho": plan.rho_max, "message": plan.message})
    instance = make_instance(cfg)
    res = reservation_for(cfg, instance, plan)
    fp = res.fixed_point()
    summary = [
        {"h": h, "m": m, "block_size": int(res.block_sizes[h, m]), "eps": float(res.eps[h, m]),
         "fixed_point": float(fp[h, m])}
        for h in range(fp.shape[0]) for m in range(fp.shape[1]) if res.block_sizes[h, m] > 0
    ]
    result = {"verdict": plan.verdict, "rho_per_type": [float(x) for x in plan.rho_per_type], **res.to_record()}
    return RunOutput("reserve", EXIT_OK, result, summary)


def _policy_table(cfg: ExperimentConfig, policies: list[str], command: str) -> RunOutput:
    run = cfg.section("run")
    N = int(cfg.section("instance")["N"])
    R = int(run["replications"])
    seeds = seeds_for(cfg, R)
    T, dt, init = float(run["horizon"]), float(run["sample_dt"]), run["init"]
    jobs = [(N, p, s, init, T, dt) for p in policies for s in seeds]
    traces = run_jobs(cfg, jobs)
    warm = float(run["warmup"])

    summary, rows, result = [], [], {}
    for a, p in enumerate(policies):
        block = traces[a * R : (a + 1) * R]
        stats = [steady_state_estimate(tr, warm) for tr in block]
        ends = [_end_queue_length(tr) for tr in block]
        for r, (tr, st) in enumerate(zip(block, stats)):
            rows.extend(_export_rows(cfg, tr, r, p))
            summary.append({"policy": p, "replication": r, "seed": seeds[r], **st.flat(),
                            "end_avg_queue_length": ends[r]})
        rec = {}
        for key, vals in (("bad_server_probability", [s.bad_server_probability for s in stats]),
                          ("queueing_probability", [s.queueing_probability for s in stats]),
                          ("avg_queue_length", [s.avg_queue_length for s in stats]),
                          ("end_avg_queue_length", ends)):
            m, se = mean_se(vals)
            rec[key] = m
            rec[key + "_se"] = se
        result[p] = rec
        summary.append({"policy": p, "replication": "mean", "seed": "", **rec})
    return RunOutput(command, EXIT_OK, result, summary, rows, seeds)


def run_simulate(cfg: ExperimentConfig, policy: str | None = None) -> RunOutput:
    return _policy_table(cfg, [policy or cfg.section("run")["policies"][0]], "simulate")


def run_compare(cfg: ExperimentConfig) -> RunOutput:
    return _policy_table(cfg, list(cfg.section("run")["policies"]), "compare")


def _busy_curves(trace: Trace, policy: str) -> np.ndarray:
    """(S, G) busy fractions: per reserved block for ICRD, per server group otherwise."""
    if policy == "icrd":
        keep = trace.block_labels[:, 0] >= 0
        return trace.x_tilde()[:, keep, 1]
    return trace.x_bar().sum(axis=2)


def _busy_bound(cfg: ExperimentConfig, policy: str) -> np.ndarray:
    plan = resolve_plan(cfg)
    if policy == "icrd":
        fp = np.where(plan.p > 0, plan.lambda_h[:, None] * plan.p / np.where(plan.p > 0, plan.mu, 1.0), 0.0)
        # block order of the trace: class-major, then group; empty blocks are kept
        return fp.ravel()
    return lambda_p_matrix(plan.p, plan.lambda_h, plan.mu).x_p.sum(axis=1)


def run_scaling(cfg: ExperimentConfig) -> RunOutput:
    sc, run = cfg.section("scaling"), cfg.section("run")
    Ns = [int(n) for n in sc["N"]]
    policies = list(sc["policies"])
    R = int(sc["replications"])
    seeds = seeds_for(cfg, R)
    T, dt = float(sc["horizon"]), float(sc["sample_dt"])
    init = run["init"]
    warm = float(run["warmup"])
    jobs = [(N, p, s, init, T, dt) for N in Ns for p in policies for s in seeds]
    traces = run_jobs(cfg, jobs)

    summary, rows, result = [], [], {}
    idx = 0
    qp: dict[str, list] = {p: [] for p in policies}
    for N in Ns:
        for p in policies:
            block = traces[idx : idx + R]
            idx += R
            q = [steady_state_estimate(tr, warm).queueing_probability for tr in block]
            curves = np.mean([_busy_curves(tr, p) for tr in block], axis=0)
            bound = _busy_bound(cfg, p)
            sup = curves.max(axis=0)
            m, se = mean_se(q)
            qp[p].append((m, se))
            summary.append({"N": N, "policy": p, "queueing_probability": m, "queueing_probability_se": se,
                            "max_sup_busy": float(sup.max()),
                            "max_sup_excess_over_fluid": float((sup - bound).max())})
            for s, t in enumerate(block[0].times):
                for g in range(curves.shape[1]):
                    rows.append((f"{p}/N={N}", -1, "busy_fraction", float(t), -1, g, 1, -1, float(curves[s, g])))
    for p in policies:
        seq = qp[p]
        mono = all(b[0] <= a[0] + 2 * math.hypot(a[1], b[1]) for a, b in zip(seq, seq[1:]))
        result[p] = {"N": Ns, "queueing_probability": [m for m, _ in seq],
                     "queueing_probability_se": [s for _, s in seq], "nonincreasing_2se": mono}
    plan = resolve_plan(cfg)
    if "spd" in policies or "pbased" in policies:
        params = lambda_p_matrix(plan.p, plan.lambda_h, plan.mu)
        rows.extend(fluid_rows(params, np.arange(0.0, T + 1e-9, dt)))
    return RunOutput("scaling", EXIT_OK, result, summary, rows, seeds)


def run_scenarios(cfg: ExperimentConfig) -> RunOutput:
    sc = cfg.section("scenarios")
    N = int(sc.get("N", cfg.section("instance")["N"]))
    policy = sc["policy"]
    inits = list(sc["inits"])
    R = int(sc["replications"])
    seeds = seeds_for(cfg, R)
    T, dt = float(sc["horizon"]), float(sc["sample_dt"])
    jobs = [(N, policy, s, init, T, dt) for init in inits for s in seeds]
    traces = run_jobs(cfg, jobs)

    curves, rows = {}, []
    for a, init in enumerate(inits):
        block = traces[a * R : (a + 1) * R]
        c = np.mean([_busy_curves(tr, policy) for tr in block], axis=0)
        curves[init] = c
        for s, t in enumerate(block[0].times):
            for g in range(c.shape[1]):
                rows.append((f"{policy}/{init}", -1, "busy_fraction", float(t), -1, g, 1, -1, float(c[s, g])))
    times = traces[0].times
    tail = times >= T / 2
    gap = 0.0
    pairs = {}
    for x, y in combinations(inits, 2):
        g = float(np.abs(curves[x][tail] - curves[y][tail]).max())
        pairs[f"{x}|{y}"] = g
        gap = max(gap, g)
    band = float(sc["band"])
    result = {"N": N, "policy": policy, "tail_gap": gap, "band": band, "within_band": gap <= band,
              "pairwise_gap": pairs}
    summary = [{"pair": k, "tail_gap": v} for k, v in pairs.items()]
    return RunOutput("scenarios", EXIT_OK, result, summary, rows, seeds)


def run_couple(cfg: ExperimentConfig) -> RunOutput:
    cp = cfg.section("couple")
    N, W, xi = instance_size(cfg)
    if N > int(cp["max_N"]):
        raise ConfigError(f"{cfg.source}: coupled runs are pure Python; N={N} exceeds [couple] max_N")
    plan = resolve_plan(cfg)
    if plan.verdict != SUBCRITICAL:
        return RunOutput("couple", VERDICT_EXIT[plan.verdict], {"verdict": plan.verdict})
    G = make_instance(cfg)
    f_env = lower_envelope(build_rate(cfg), plan.w_breaks, plan.v_breaks,
                           int(cfg.section("check")["grid"]), bool(cfg.section("check")["use_lipschitz"]))
    Gp = build_instance(N, W, f_env, build_arrival(cfg), membership(cfg, "dispatchers"),
                        membership(cfg, "servers"), xi=xi)
    res = reservation_for(cfg, Gp, plan)
    R = int(cfg.section("run")["replications"])
    seeds = seeds_for(cfg, R)
    summary = []
    holds = True
    for s in seeds:
        out = coupled_dominance_run(G, Gp, res, float(cp["horizon"]), s)
        holds &= out.holds
        summary.append({"seed": s, "holds": out.holds, "events": out.n_events, "violations": len(out.violations)})
    result = {"dominance_holds": holds, "replications": R, **res.to_record()}
    return RunOutput("couple", EXIT_OK if holds else EXIT_RUNTIME, result, summary, [], seeds)
