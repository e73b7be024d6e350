"""Command-line entry point: ``hetlb <subcommand> --config FILE --out DIR``."""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tomlkit

from . import __version__
from . import experiments as ex
from .config import ConfigError, ExperimentConfig, load_config, reference_config_path
from .simulator import TRACE_COLUMNS

log = logging.getLogger("hetlb")

COMMANDS = {
    "check": ex.run_check,
    "reserve": ex.run_reserve,
    "simulate": ex.run_simulate,
    "compare": ex.run_compare,
    "scaling": ex.run_scaling,
    "scenarios": ex.run_scenarios,
    "couple": ex.run_couple,
}


def _plain(x):
    """Convert numpy scalars/arrays and drop None so the value is TOML-serialisable."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items() if v is not None}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_plain(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x)
    return x


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            raise ValueError("refusing to write NaN to CSV")
        return repr(float(v))
    return str(v)


def write_csv(path: Path, rows: Sequence, columns: Optional[Sequence[str]] = None) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if columns is None:
            columns = []
            for r in rows:
                for k in r:
                    if k not in columns:
                        columns.append(k)
            w.writerow(columns)
            for r in rows:
                w.writerow([_cell(r.get(c, "")) for c in columns])
        else:
            w.writerow(columns)
            for r in rows:
                w.writerow([_cell(v) for v in r])


def write_report(path: Path, cfg: ExperimentConfig, out: ex.RunOutput) -> None:
    doc = tomlkit.document()
    doc.add(tomlkit.comment(f"hetlb {__version__} {out.command} report; the config below reproduces it"))
    for key, value in _plain(cfg.data).items():
        doc[key] = value
    result = {"command": out.command, "exit_code": out.exit_code, "seeds": out.seeds, **out.result}
    doc["result"] = _plain(result)
    path.write_text(tomlkit.dumps(doc))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetlb", description=__doc__)
    ap.add_argument("--version", action="version", version=f"hetlb {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None,
                        help="TOML config (default: the shipped reference config)")
        sp.add_argument("--out", type=Path, default=None, help="output directory (default runs/<command>)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--replications", type=int, default=None)
        sp.add_argument("--workers", type=int, default=None, help="worker processes (0 = all cores)")
        sp.add_argument("--threshold", type=float, default=None, help="bad-server rate threshold")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "simulate":
            sp.add_argument("--policy", default=None, help="policy to run (default: first in [run] policies)")
    return ap


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config or reference_config_path())
    cfg = cfg.override("run", seed=args.seed, replications=args.replications, workers=args.workers,
                       threshold=args.threshold)
    if args.replications is not None:
        if args.replications < 1:
            raise ConfigError("--replications must be at least 1")
        for sec in ("scaling", "scenarios"):
            cfg = cfg.override(sec, replications=args.replications)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        fn = COMMANDS[args.command]
        out = fn(cfg, args.policy) if args.command == "simulate" else fn(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ex.EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure inside a run maps to one exit code
        log.debug("run failed", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return ex.EXIT_RUNTIME

    out_dir = args.out or Path("runs") / args.command
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "traces.csv", out.traces, TRACE_COLUMNS)
    write_csv(out_dir / "summary.csv", out.summary)
    write_report(out_dir / "report.txt", cfg, out)
    msg = out.result.get("verdict") or out.result.get("message") or "done"
    print(f"{args.command}: {msg} (exit {out.exit_code}) -> {out_dir}")
    if out.result.get("message") and out.exit_code:
        print(out.result["message"])
    return out.exit_code


if __name__ == "__main__":
    sys.exit(main())
