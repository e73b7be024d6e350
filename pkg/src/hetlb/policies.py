"""Routing policies and the ICRD capacity reservation.

Every policy compiles to a handful of integer/float arrays consumed by the
numba kernels in ``_engine``; ``route`` runs the same kernel on a single
decision so tests exercise exactly the code the simulator uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _engine as eng
from .criticality import (
    SUBCRITICAL,
    EpsilonAllocation,
    PartitionPlan,
    check_poly_membership,
    routing_matrix,
)
from .model import SystemInstance, group_indices, interval_index, validate_breaks

KINDS = {
    "random": eng.RANDOM,
    "jiq": eng.JIQ,
    "jfiq": eng.JFIQ,
    "jfsq": eng.JFSQ,
    "mindrift": eng.MINDRIFT,
    "pbased": eng.PBASED,
    "icrd": eng.ICRD,
}
ALIASES = {"spd": "pbased", "p-based": "pbased", "pbasedjiq": "pbased", "icrdjiq": "icrd",
           "randomopenloop": "random", "min-drift": "mindrift"}
FLOOR_GUARD = 1e-9


class PolicyError(ValueError):
    pass


class ReservationShortfall(PolicyError):
    def __init__(self, m: int, shortfall: int, requested: int, available: int):
        self.m, self.shortfall = m, shortfall
        super().__init__(
            f"server group {m}: reservation needs {requested} servers but only {available} exist "
            f"(short by {shortfall}); shrink eps and retry"
        )


@dataclass
class ReservationPlan:
    """ICRD blocks: server j is reserved for task class ``server_class[j]`` (-1 = unreserved)."""

    instance: SystemInstance
    w_breaks: np.ndarray
    v_breaks: np.ndarray
    p: np.ndarray
    eps: np.ndarray
    lambda_h: np.ndarray
    mu: np.ndarray
    block_sizes: np.ndarray
    server_class: np.ndarray
    server_group: np.ndarray
    dispatcher_group: np.ndarray

    @property
    def unreserved(self) -> np.ndarray:
        M = self.block_sizes.shape[1]
        return np.bincount(self.server_group[self.server_class < 0], minlength=M)

    def block_of_server(self, j: int) -> Optional[tuple[int, int]]:
        h = int(self.server_class[j])
        return None if h < 0 else (h, int(self.server_group[j]))

    def pruned_rate(self, i: int, j: int) -> float:
        if self.server_class[j] != self.dispatcher_group[i]:
            return 0.0
        return self.instance.rate(i, j)

    def fixed_point(self) -> np.ndarray:
        """Busy fraction per (h, m) block at the fluid fixed point."""
        safe = np.where(self.p > 0, self.mu, 1.0)
        return np.where(self.p > 0, self.lambda_h[:, None] * self.p / safe, 0.0)

    def to_record(self) -> dict:
        return {
            "block_sizes": [[int(x) for x in row] for row in self.block_sizes],
            "unreserved": [int(x) for x in self.unreserved],
            "eps": [[float(x) for x in row] for row in self.eps],
            "assignment": "ascending index order within each server group",
        }


def icrd_reserve(instance: SystemInstance, plan: PartitionPlan, eps) -> ReservationPlan:
    if plan.verdict != SUBCRITICAL or plan.p is None:
        raise PolicyError("ICRD needs a subcritical partition plan")
    eps = np.asarray(eps.eps if isinstance(eps, EpsilonAllocation) else eps, dtype=float)
    p = routing_matrix(plan.p)
    if not check_poly_membership(eps, p, plan.lambda_h, plan.mu, plan.v_widths):
        raise PolicyError("eps is not in Poly(p)")
    N = instance.N
    H, M = p.shape
    safe = np.where(p > 0, plan.mu, 1.0)
    target = np.where(p > 0, N * (plan.lambda_h[:, None] * p / safe + eps), 0.0)
    sizes = np.floor(target + FLOOR_GUARD).astype(np.int64)

    groups = group_indices(instance, plan.w_breaks, plan.v_breaks)
    server_class = np.full(N, -1, dtype=np.int64)
    for m in range(M):
        members = np.asarray(groups.server_groups[m], dtype=np.int64)
        need = int(sizes[:, m].sum())
        if need > members.size:
            raise ReservationShortfall(m, need - members.size, need, members.size)
        start = 0
        for h in range(H):
            server_class[members[start : start + sizes[h, m]]] = h
            start += sizes[h, m]
    for h in range(H):
        if groups.dispatcher_groups[h].size and sizes[h].sum() == 0:
            raise PolicyError(f"task class {h} has dispatchers but no reserved servers")
    return ReservationPlan(
        instance=instance,
        w_breaks=plan.w_breaks,
        v_breaks=plan.v_breaks,
        p=p,
        eps=eps,
        lambda_h=np.asarray(plan.lambda_h, dtype=float),
        mu=np.asarray(plan.mu, dtype=float),
        block_sizes=sizes,
        server_class=server_class,
        server_group=groups.server_labels(N),
        dispatcher_group=groups.dispatcher_labels(instance.W),
    )


@dataclass(frozen=True, eq=False)
class PolicySpec:
    kind: str
    p: Optional[np.ndarray] = None
    w_breaks: Optional[np.ndarray] = None
    v_breaks: Optional[np.ndarray] = None
    reservation: Optional[ReservationPlan] = None
    rng_stream: int = 0

    def __post_init__(self):
        kind = ALIASES.get(self.kind.lower(), self.kind.lower())
        if kind not in KINDS:
            raise PolicyError(f"unknown policy {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind in ("random", "pbased"):
            if self.p is None or self.w_breaks is None or self.v_breaks is None:
                raise PolicyError(f"{kind} needs p, w_breaks and v_breaks")
            p = routing_matrix(self.p)
            w = validate_breaks(self.w_breaks, "w_breaks")
            v = validate_breaks(self.v_breaks, "v_breaks")
            if p.shape != (w.size - 1, v.size - 1):
                raise PolicyError("p shape does not match the partition")
            object.__setattr__(self, "p", p)
            object.__setattr__(self, "w_breaks", w)
            object.__setattr__(self, "v_breaks", v)
        if kind == "icrd" and self.reservation is None:
            raise PolicyError("icrd needs a reservation plan")

    @property
    def name(self) -> str:
        return self.kind

    @classmethod
    def random_open_loop(cls, p, w_breaks, v_breaks):
        return cls("random", p=p, w_breaks=w_breaks, v_breaks=v_breaks)

    @classmethod
    def pbased(cls, p, w_breaks, v_breaks):
        return cls("pbased", p=p, w_breaks=w_breaks, v_breaks=v_breaks)

    @classmethod
    def icrd(cls, reservation: ReservationPlan):
        return cls("icrd", reservation=reservation)


@dataclass
class CompiledPolicy:
    """Flat arrays describing one policy on one instance."""

    code: int
    dgroup: np.ndarray
    sgroup: np.ndarray
    sclass: np.ndarray
    pcum: np.ndarray
    pool_of: np.ndarray
    n_pools: int
    H: int
    M: int
    w_breaks: np.ndarray
    v_breaks: np.ndarray
    meta: dict = field(default_factory=dict)


def _labels(instance: SystemInstance, w_breaks, v_breaks):
    w = validate_breaks(w_breaks, "w_breaks")
    v = validate_breaks(v_breaks, "v_breaks")
    dg = interval_index(w, instance.dispatcher_coords).astype(np.int64)
    sg = interval_index(v, instance.server_coords).astype(np.int64)
    return w, v, dg, sg


def compile_policy(policy: PolicySpec, instance: SystemInstance, w_breaks=None, v_breaks=None) -> CompiledPolicy:
    """Validate ``policy`` against ``instance`` and lower it to engine arrays.

    ``w_breaks``/``v_breaks`` only set the reporting groups for policies that
    carry no partition of their own.
    """
    if not instance.has_table:
        raise PolicyError("instance has no rate table; raise dense_cap to simulate it")
    kind = policy.kind
    code = KINDS[kind]
    N, W = instance.N, instance.W
    meta: dict = {"policy": kind}
    if kind == "icrd":
        res = policy.reservation
        if res.instance is not instance:
            raise PolicyError("reservation was built for a different instance")
        w, v = res.w_breaks, res.v_breaks
        dg, sg = res.dispatcher_group.astype(np.int64), res.server_group.astype(np.int64)
        sclass = res.server_class.astype(np.int64)
        H, M = res.p.shape
        pool_of, n_pools = sclass.copy(), H
        pcum = np.zeros((H, M))
        meta["reservation"] = res.to_record()
    elif kind in ("random", "pbased"):
        w, v, dg, sg = _labels(instance, policy.w_breaks, policy.v_breaks)
        H, M = policy.p.shape
        sizes = np.bincount(sg, minlength=M)
        for h in range(H):
            members = np.flatnonzero(dg == h)
            for m in np.flatnonzero(policy.p[h] > 0):
                if sizes[m] == 0:
                    raise PolicyError(f"p sends class {h} to empty server group {m}")
                if members.size:
                    block = instance.table[np.ix_(instance.row_key[members], instance.col_key[sg == m])]
                    if np.any(block <= 0):
                        raise PolicyError(f"p sends class {h} to group {m} holding incompatible servers")
        pcum = np.cumsum(policy.p, axis=1)
        for h in range(H):
            pcum[h, np.flatnonzero(policy.p[h] > 0)[-1] :] = 1.0
        sclass = np.zeros(N, dtype=np.int64)
        pool_of, n_pools = sg.copy(), M
        meta["p"] = policy.p.tolist()
    else:
        w, v, dg, sg = _labels(instance, w_breaks if w_breaks is not None else [0.0, 1.0],
                               v_breaks if v_breaks is not None else [0.0, 1.0])
        H, M = w.size - 1, v.size - 1
        sclass = np.zeros(N, dtype=np.int64)
        pool_of, n_pools = np.zeros(N, dtype=np.int64), 1
        pcum = np.zeros((H, M))
    return CompiledPolicy(code, dg, sg, sclass, pcum, pool_of, n_pools, H, M, w, v, meta)


def route(policy: PolicySpec, instance: SystemInstance, Z, Q, i: int, rng: np.random.Generator,
          compiled: Optional[CompiledPolicy] = None) -> int:
    """One routing decision for a task from dispatcher ``i`` given queue lengths Z and workloads Q."""
    cp = compiled or compile_policy(policy, instance)
    Z = np.asarray(Z, dtype=np.int64)
    Q = np.asarray(Q, dtype=float)
    perm, _, pool_off, idle_cnt = eng.build_pools(cp.pool_of, cp.n_pools, Z)
    j = eng.route_one(cp.code, int(i), rng, instance.table, instance.row_key, instance.col_key,
                      cp.dgroup, cp.sclass, cp.pcum, perm, pool_off, idle_cnt, Z, Q)
    if j < 0:
        raise PolicyError(f"no compatible server for dispatcher {i}")
    return int(j)
