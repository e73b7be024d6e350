import csv
import math

import numpy as np
import pytest

from hetlb import cli
from hetlb.config import load_config, parse_config, reference_config_path
from hetlb.criticality import HEAVY_LOAD_MESSAGE
from hetlb.experiments import run_scenarios
from hetlb.simulator import TRACE_COLUMNS

CONST = """
[instance]
N = {N}
W = {N}
xi = 1.0
[instance.rate]
kind = "constant"
value = 1.0
[instance.arrival]
kind = "constant"
value = {lam}
[check]
rho_star = 0.9
n_max = {n_max}
[run]
policies = ["{policy}"]
horizon = {T}
sample_dt = {dt}
replications = {R}
seed = 7
workers = 1
[scenarios]
policy = "{policy}"
inits = {inits}
horizon = {T}
sample_dt = {dt}
replications = {R}
"""


def write_cfg(tmp_path, name="cfg.toml", **kw):
    vals = dict(N=4, lam=0.5, n_max=3, policy="jiq", T=1.0, dt=0.25, R=1,
                inits='["all-empty", "all-one", "half-half"]')
    vals.update(kw)
    path = tmp_path / name
    path.write_text(CONST.format(**vals))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_tiny_simulate_emits_schema_valid_csv(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["simulate", "--config", str(write_cfg(tmp_path)), "--out", str(out)]) == 0
    rows = read_csv(out / "traces.csv")
    assert tuple(rows[0]) == TRACE_COLUMNS
    for r in rows[1:]:
        assert len(r) == len(TRACE_COLUMNS)
        int(r[1]), int(r[4]), int(r[5]), int(r[6]), int(r[7])
        assert math.isfinite(float(r[3])) and math.isfinite(float(r[8]))
    summary = read_csv(out / "summary.csv")
    assert "bad_server_probability" in summary[0]
    assert all("nan" not in cell.lower() for row in summary for cell in row)


def test_check_verdicts_and_exit_codes(tmp_path, capsys):
    assert cli.main(["check", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path / "a")]) == 0
    rep = load_config(tmp_path / "a" / "report.txt")
    assert rep.source  # report parses back as a config
    text = (tmp_path / "a" / "report.txt").read_text()
    assert 'verdict = "subcritical"' in text and "n = 1" in text

    heavy = write_cfg(tmp_path, "heavy.toml", lam=2.0)
    assert cli.main(["check", "--config", str(heavy), "--out", str(tmp_path / "b")]) == 3
    assert HEAVY_LOAD_MESSAGE in capsys.readouterr().out

    zero = write_cfg(tmp_path, "zero.toml", n_max=0)
    assert cli.main(["check", "--config", str(zero), "--out", str(tmp_path / "c")]) == 2


def test_reference_check_is_undecided(tmp_path):
    # fifths never align with dyadic cells, so the search cannot certify the shipped surface
    assert cli.main(["check", "--out", str(tmp_path)]) == 5
    assert 'verdict = "undecided"' in (tmp_path / "report.txt").read_text()


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[instance\nN = 1\n")
    assert cli.main(["check", "--config", str(bad)]) == 2
    assert "line 1" in capsys.readouterr().err
    assert cli.main(["simulate", "--config", str(write_cfg(tmp_path)), "--replications", "0"]) == 2
    assert cli.main(["simulate", "--config", str(write_cfg(tmp_path)), "--policy", "nope",
                     "--out", str(tmp_path / "x")]) == 2


def test_report_reproduces_run_bit_exactly(tmp_path):
    cfg = write_cfg(tmp_path, N=10, T=5.0, R=3)
    first, second = tmp_path / "first", tmp_path / "second"
    assert cli.main(["compare", "--config", str(cfg), "--out", str(first), "--seed", "11"]) == 0
    text = (first / "report.txt").read_text()
    assert "seeds = [11, 12, 13]" in text
    assert cli.main(["compare", "--config", str(first / "report.txt"), "--out", str(second)]) == 0
    for name in ("traces.csv", "summary.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_workers_do_not_change_results(tmp_path):
    cfg = write_cfg(tmp_path, N=10, T=5.0, R=3)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["compare", "--config", str(cfg), "--out", str(a), "--workers", "1"]) == 0
    assert cli.main(["compare", "--config", str(cfg), "--out", str(b), "--workers", "2"]) == 0
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()


def test_identical_initial_states_have_zero_gap(tmp_path):
    cfg = load_config(write_cfg(tmp_path, N=20, T=4.0, R=2, inits='["all-one", "all-one"]'))
    assert run_scenarios(cfg).result["tail_gap"] == 0.0


def test_pure_death_scenarios_decay_together(tmp_path):
    cfg = load_config(write_cfg(tmp_path, N=100, lam=0.0, T=20.0, dt=1.0, R=2))
    out = run_scenarios(cfg)
    assert out.result["tail_gap"] < 0.02
    last = [r[8] for r in out.traces if r[3] == 20.0]
    assert max(last) < 0.02


def test_reference_subcommands_small(tmp_path):
    small = reference_config_path().read_text()
    small = small.replace("N = [100, 500, 2000]", "N = [20, 40]").replace("N = 2000", "N = 40")
    small = small.replace("horizon = 500.0", "horizon = 10.0").replace("horizon = 100.0", "horizon = 5.0")
    path = tmp_path / "ref.toml"
    path.write_text(small)
    for cmd in ("reserve", "compare", "scaling", "scenarios", "couple"):
        out = tmp_path / cmd
        assert cli.main([cmd, "--config", str(path), "--out", str(out), "--replications", "2",
                         "--workers", "1"]) == 0, cmd
        for name in ("traces.csv", "summary.csv", "report.txt"):
            assert (out / name).exists()
    text = (tmp_path / "compare" / "report.txt").read_text()
    cfg = parse_config(text, "report")
    assert cfg.section("run")["replications"] == 2
    assert "[result.icrd]" in text and "bad_server_probability = 0.0" in text
