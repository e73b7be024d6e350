"""TOML experiment configuration: defaults, validation and object builders."""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .criticality import (
    PartitionPlan,
    SUBCRITICAL,
    epsilon_allocation,
    evaluate_partition,
    find_subcritical,
)
from .model import (
    ArrivalRateFunction,
    MembershipMap,
    ModelError,
    RateFunction,
    StepwiseRateFunction,
    SystemInstance,
    build_instance,
    bump_rate_function,
    constant_rate,
)
from .policies import PolicySpec, ReservationShortfall, icrd_reserve
from .simulator import InitialState

DEFAULTS: dict[str, dict[str, Any]] = {
    "instance": {"N": 50, "dense_cap": 10**7},
    "check": {"rho_star": 0.9, "n_max": 4, "grid": 16, "use_lipschitz": False},
    "run": {
        "policies": ["icrd", "spd"],
        "horizon": 100.0,
        "sample_dt": 1.0,
        "replications": 1,
        "seed": 0,
        "warmup": 0.5,
        "threshold": 0.5,
        "init": "all-empty",
        "L_cap": 10,
        "workers": 0,
        "export_levels": 3,
        "eps_shrink": 0.5,
        "eps_retries": 4,
        "debug": False,
    },
    "scaling": {"N": [100, 500, 2000], "policies": ["icrd", "spd"], "horizon": 100.0, "sample_dt": 1.0,
                "replications": 4},
    "scenarios": {"policy": "icrd", "inits": ["all-empty", "all-one", "half-half"], "horizon": 20.0,
                  "sample_dt": 0.5, "replications": 8, "band": 0.02},
    "couple": {"horizon": 100.0, "max_N": 200},
}


class ConfigError(ValueError):
    pass


def reference_config_path() -> Path:
    return Path(str(resources.files("hetlb") / "configs" / "reference.toml"))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """Resolved configuration: user values over defaults, plain Python types only."""

    data: dict
    source: str = "<memory>"

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    def field(self, section: str, key: str, kind=None, positive: bool = False):
        sec = self.data.get(section)
        if sec is None or key not in sec:
            raise ConfigError(f"{self.source}: missing [{section}] {key}")
        val = sec[key]
        if kind is not None:
            try:
                val = kind(val)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{self.source}: [{section}] {key} = {val!r}: {exc}") from None
        if positive and not val > 0:
            raise ConfigError(f"{self.source}: [{section}] {key} must be positive, got {val!r}")
        return val

    def override(self, section: str, **values) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        sec = data.setdefault(section, {})
        sec.update({k: v for k, v in values.items() if v is not None})
        return ExperimentConfig(data, self.source)


def parse_config(text: str, source: str = "<memory>") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    raw.pop("result", None)  # reports carry their results alongside the config
    if "instance" not in raw:
        raise ConfigError(f"{source}: missing [instance] section")
    data = _merge(DEFAULTS, raw)
    cfg = ExperimentConfig(data, source)
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text, str(path))


def _validate(cfg: ExperimentConfig) -> None:
    cfg.field("instance", "N", int, positive=True)
    for key in ("horizon", "sample_dt"):
        cfg.field("run", key, float, positive=True)
    if cfg.field("run", "replications", int) < 1:
        raise ConfigError(f"{cfg.source}: [run] replications must be at least 1")
    w = cfg.field("run", "warmup", float)
    if not 0 <= w < 1:
        raise ConfigError(f"{cfg.source}: [run] warmup must lie in [0, 1)")
    try:
        InitialState(cfg.field("run", "init"))
    except ValueError:
        raise ConfigError(f"{cfg.source}: [run] init must be one of all-empty, all-one, half-half") from None
    if cfg.field("check", "n_max", int) < 1:
        raise ConfigError(f"{cfg.source}: [check] n_max must be at least 1")
    rs = cfg.field("check", "rho_star", float)
    if not 0 < rs < 1:
        raise ConfigError(f"{cfg.source}: [check] rho_star must lie in (0, 1)")
    if not cfg.field("run", "policies"):
        raise ConfigError(f"{cfg.source}: [run] policies must be nonempty")
    if not cfg.section("scenarios").get("inits"):
        raise ConfigError(f"{cfg.source}: [scenarios] inits must be nonempty")
    Ns = cfg.section("scaling").get("N", [])
    if list(Ns) != sorted(Ns):
        raise ConfigError(f"{cfg.source}: [scaling] N must be ascending")
    # building the model objects surfaces field-level errors early
    build_rate(cfg)
    build_arrival(cfg)
    membership(cfg, "dispatchers")
    membership(cfg, "servers")


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def build_rate(cfg: ExperimentConfig) -> RateFunction:
    spec = cfg.section("instance").get("rate")
    if not isinstance(spec, dict):
        raise ConfigError(f"{cfg.source}: missing [instance.rate]")
    kind = spec.get("kind", "stepwise")
    try:
        if kind == "stepwise":
            return StepwiseRateFunction(spec["w_breaks"], spec["v_breaks"], spec["rates"])
        if kind == "constant":
            return constant_rate(float(spec["value"]))
        if kind == "bumps":
            return bump_rate_function(float(spec["base"]), spec["centers"], spec["amplitudes"], float(spec["width"]))
    except KeyError as exc:
        raise ConfigError(f"{cfg.source}: [instance.rate] missing {exc.args[0]}") from None
    except (ModelError, ValueError, TypeError) as exc:
        raise ConfigError(f"{cfg.source}: [instance.rate] {exc}") from None
    raise ConfigError(f"{cfg.source}: [instance.rate] unknown kind {kind!r}")


def build_arrival(cfg: ExperimentConfig) -> ArrivalRateFunction:
    spec = cfg.section("instance").get("arrival")
    if not isinstance(spec, dict):
        raise ConfigError(f"{cfg.source}: missing [instance.arrival]")
    kind = spec.get("kind", "affine")
    try:
        if kind == "affine":
            return ArrivalRateFunction.affine(float(spec.get("slope", 0.0)), float(spec.get("intercept", 0.0)))
        if kind == "constant":
            value = float(spec["value"])
            return ArrivalRateFunction.zero() if value == 0 else ArrivalRateFunction.constant(value)
        if kind == "stepwise":
            return ArrivalRateFunction.stepwise(spec["breaks"], spec["values"])
    except KeyError as exc:
        raise ConfigError(f"{cfg.source}: [instance.arrival] missing {exc.args[0]}") from None
    except (ModelError, ValueError, TypeError) as exc:
        raise ConfigError(f"{cfg.source}: [instance.arrival] {exc}") from None
    raise ConfigError(f"{cfg.source}: [instance.arrival] unknown kind {kind!r}")


def membership(cfg: ExperimentConfig, which: str) -> MembershipMap:
    spec = cfg.section("instance").get("membership", {}).get(which, {"kind": "equispaced"})
    try:
        vals = spec.get("values")
        return MembershipMap(spec.get("kind", "equispaced"), spec.get("seed"),
                             tuple(vals) if vals is not None else None)
    except (ModelError, ValueError, TypeError) as exc:
        raise ConfigError(f"{cfg.source}: [instance.membership.{which}] {exc}") from None


def instance_size(cfg: ExperimentConfig, N: Optional[int] = None) -> tuple[int, int, Optional[float]]:
    inst = cfg.section("instance")
    base_N = int(inst["N"])
    N = base_N if N is None else int(N)
    if "W" in inst:
        W = max(1, round(int(inst["W"]) * N / base_N))
    else:
        W = N
    return N, W, inst.get("xi")


def make_instance(cfg: ExperimentConfig, N: Optional[int] = None) -> SystemInstance:
    N, W, xi = instance_size(cfg, N)
    try:
        return build_instance(N, W, build_rate(cfg), build_arrival(cfg), membership(cfg, "dispatchers"),
                              membership(cfg, "servers"), xi=xi,
                              dense_cap=int(cfg.section("instance").get("dense_cap", 10**7)))
    except ModelError as exc:
        raise ConfigError(f"{cfg.source}: [instance] {exc}") from None


def xi_of(cfg: ExperimentConfig) -> float:
    inst = cfg.section("instance")
    if "xi" in inst:
        return float(inst["xi"])
    N, W, _ = instance_size(cfg)
    return W / N


def resolve_plan(cfg: ExperimentConfig) -> PartitionPlan:
    """Partition for ICRD/SPD: explicit [partition], else the rate table's own grid, else a search."""
    f, lam = build_rate(cfg), build_arrival(cfg)
    chk = cfg.section("check")
    xi = xi_of(cfg)
    part = cfg.section("partition")
    if part:
        try:
            return evaluate_partition(lam, f, part["w_breaks"], part["v_breaks"], part.get("p"), xi=xi,
                                      grid=int(chk["grid"]), use_lipschitz=bool(chk["use_lipschitz"]))
        except KeyError as exc:
            raise ConfigError(f"{cfg.source}: [partition] missing {exc.args[0]}") from None
        except ValueError as exc:
            raise ConfigError(f"{cfg.source}: [partition] {exc}") from None
    if isinstance(f, StepwiseRateFunction):
        return evaluate_partition(lam, f, f.w_breaks, f.v_breaks, None, xi=xi)
    return find_subcritical(lam, f, float(chk["rho_star"]), int(chk["n_max"]), xi=xi,
                            grid=int(chk["grid"]), use_lipschitz=bool(chk["use_lipschitz"]))


def reservation_for(cfg: ExperimentConfig, instance: SystemInstance, plan: PartitionPlan):
    """ICRD reservation, shrinking eps geometrically when finite-N rounding overflows a group."""
    if plan.verdict != SUBCRITICAL:
        raise ConfigError(f"{cfg.source}: partition is {plan.verdict}; ICRD and SPD need a subcritical plan")
    eps = epsilon_allocation(plan.p, plan.lambda_h, plan.mu, plan.v_widths).eps
    run = cfg.section("run")
    shrink = float(run["eps_shrink"])
    last: Optional[Exception] = None
    for _ in range(int(run["eps_retries"]) + 1):
        try:
            return icrd_reserve(instance, plan, eps)
        except ReservationShortfall as exc:
            last = exc
            eps = eps * shrink
    raise last


def make_policy(cfg: ExperimentConfig, name: str, instance: SystemInstance,
                plan: Optional[PartitionPlan] = None) -> PolicySpec:
    key = name.lower()
    if key in ("icrd", "icrdjiq"):
        plan = plan or resolve_plan(cfg)
        return PolicySpec.icrd(reservation_for(cfg, instance, plan))
    if key in ("spd", "pbased", "p-based", "pbasedjiq", "random", "randomopenloop"):
        plan = plan or resolve_plan(cfg)
        if plan.verdict != SUBCRITICAL:
            raise ConfigError(f"{cfg.source}: partition is {plan.verdict}; {name} needs a subcritical plan")
        return PolicySpec(key, p=plan.p, w_breaks=plan.w_breaks, v_breaks=plan.v_breaks)
    try:
        return PolicySpec(key)
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: [run] policies: {exc}") from None


def reporting_breaks(cfg: ExperimentConfig):
    """Groups used to report policies that carry no partition."""
    part = cfg.section("partition")
    if part and "w_breaks" in part:
        return np.asarray(part["w_breaks"], float), np.asarray(part["v_breaks"], float)
    f = build_rate(cfg)
    if isinstance(f, StepwiseRateFunction):
        return f.w_breaks, f.v_breaks
    return np.array([0.0, 1.0]), np.array([0.0, 1.0])
