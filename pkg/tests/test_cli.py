import json
import os

import pytest
import yaml

from ddpmlmc import cli
from ddpmlmc.calibration import CalibrationReport
from ddpmlmc.config import default_config_text
from ddpmlmc.optimizer import error_floor
from ddpmlmc.stochastic import DeviceSampler

SMALL = {"hs": [5.0, 3.5, 2.5, 1.25], "h_ref": 0.625, "seeds": 6, "variance_levels": 4,
         "timing_samples": 2}


def _config(path, out, **calibration):
    d = yaml.safe_load(default_config_text())
    d["calibration"] = dict(SMALL, **calibration)
    d["run"]["out"] = str(out)
    path.write_text(yaml.safe_dump(d))
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root / "small.yaml", root / "out")
    assert cli.main(["calibrate", "--config", cfg]) == cli.EXIT_OK
    assert cli.main(["optimize", "--config", cfg]) == cli.EXIT_OK
    return root, cfg


def test_parser_flags():
    a = cli.build_parser().parse_args(
        ["optimize", "--eps", "0.1,0.05", "--eps-units", "absolute", "--variant", "geo",
         "--lmax", "3", "--seed", "7", "--threads", "2", "--out", "x"])
    assert (a.eps, a.eps_units, a.variant, a.lmax, a.seed, a.threads, a.out) == \
        ("0.1,0.05", "absolute", "geo", 3, 7, 2, "x")
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["optimize", "--variant", "nope"])


def test_config_errors(tmp_path, capsys):
    assert cli.main(["calibrate", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("geometry: {width: 60.0, typo: 1}\n")
    assert cli.main(["calibrate", "--config", str(bad), "--dry-run"]) == cli.EXIT_CONFIG
    assert cli.main(["calibrate", "--threads", "0", "--dry-run"]) == cli.EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_calibrate_dry_run(tmp_path, capsys):
    cfg = _config(tmp_path / "c.yaml", tmp_path / "never")
    assert cli.main(["calibrate", "--config", cfg, "--dry-run"]) == cli.EXIT_OK
    assert "450 vertices" in capsys.readouterr().out
    assert not (tmp_path / "never").exists()


def test_outputs_round_trip(run_dir):
    root, cfg = run_dir
    out = root / "out"
    for name in ("report.json", "errors.csv", "timings.csv", "qoi_table.csv",
                 "summary.csv", "levels.csv"):
        assert (out / name).exists(), name
    for name in ("summary.csv", "levels.csv", "errors.csv", "timings.csv"):
        text = (out / name).read_text()
        columns = text.splitlines()[0].split(",")
        rows = cli.read_csv(out / name)
        cli.write_csv(out / "copy.csv", columns, rows)
        assert (out / "copy.csv").read_text() == text, name
    for name in ["report.json"] + [f"plans/{p}" for p in os.listdir(out / "plans")]:
        text = (out / name).read_text()
        assert cli.dumps(json.loads(text)) == text, name
    rows = cli.read_summary(out / "summary.csv")
    assert len(rows) == 7 * 3 and all(r["status"] == "ok" for r in rows)
    # plans stay inside the calibrated mesh range
    assert max(float(r["h0"]) for r in rows) <= max(SMALL["hs"]) * (1 + 1e-9)


def test_optimize_infeasible_exit(run_dir, tmp_path):
    root, cfg = run_dir
    report = CalibrationReport.load(root / "out" / "report.json")
    below = error_floor(report.error_model) / 2
    args = ["optimize", "--config", cfg, "--report", str(root / "out" / "report.json"),
            "--out", str(tmp_path), "--eps", repr(below), "--eps-units", "absolute"]
    assert cli.main(args) == cli.EXIT_INFEASIBLE
    rows = cli.read_summary(tmp_path / "summary.csv")
    assert {r["status"] for r in rows} == {"infeasible"}
    assert cli.main(args[:-4] + ["--dry-run"]) == cli.EXIT_OK
    assert cli.main(["optimize", "--config", cfg, "--out", str(tmp_path / "none")]) \
        == cli.EXIT_CONFIG


def test_compare(run_dir, tmp_path):
    root, cfg = run_dir
    s = str(root / "out" / "summary.csv")
    out = tmp_path / "cmp.csv"
    assert cli.main(["compare", s, s, "--out", str(out)]) == cli.EXIT_OK
    rows = cli.read_csv(out)
    summary = cli.read_summary(s)
    for r in rows:
        assert float(r["rel_mc_1"]) == 1.0 and float(r["rel_geo_1"]) == 1.0
        eps = float(r["epsilon"])
        w = {x["variant"]: x["work"] for x in summary if x["epsilon"] == eps}
        assert float(r["ratio_mc_geo"]) == pytest.approx(w["mc"] / w["geo"])
    # a summary on another grid cannot be joined
    args = ["optimize", "--config", cfg, "--report", str(root / "out" / "report.json"),
            "--out", str(tmp_path), "--eps", "0.5,0.3", "--variant", "mc"]
    assert cli.main(args) == cli.EXIT_OK
    assert cli.main(["compare", s, str(tmp_path / "summary.csv")]) == cli.EXIT_CONFIG


def test_estimate_single_solve(run_dir, tmp_path):
    root, cfg = run_dir
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"variant": "mc", "plan": {"h": 5.0, "M": 1}}))
    args = ["estimate", "--config", cfg, "--plan", str(plan), "--out", str(tmp_path),
            "--seed", "3", "--threads", "1"]
    assert cli.main(args) == cli.EXIT_OK
    doc = json.loads((tmp_path / "estimate.json").read_text())
    q = DeviceSampler(seed=3)((0, 0), 5.0)[0]
    assert doc["mean"] == q
    assert cli.main(["estimate", "--config", cfg, "--plan", str(tmp_path / "nope.json")]) \
        == cli.EXIT_CONFIG


def test_estimate_seeds_and_timing(run_dir, tmp_path):
    root, cfg = run_dir
    out = root / "out"
    plan_path = out / "plans" / "geo_eps2.json"
    plan = json.loads(plan_path.read_text())
    eps = plan["epsilon"]
    means = []
    for seed in (1, 2):
        d = tmp_path / str(seed)
        assert cli.main(["estimate", "--config", cfg, "--plan", str(plan_path), "--out", str(d),
                         "--report", str(out / "report.json"), "--seed", str(seed),
                         "--threads", "1"]) == cli.EXIT_OK
        doc = json.loads((d / "estimate.json").read_text())
        means.append(doc["mean"])
        assert [l["M"] for l in doc["levels"]] == plan["plan"]["samples"]
    assert abs(means[0] - means[1]) < 3 * eps
    wall = sum(l["wall_clock"] for l in doc["levels"])
    predicted = sum(l["predicted_seconds"] for l in doc["levels"])
    assert 0.5 * predicted <= wall <= 1.5 * predicted


@pytest.mark.slow
def test_calibrate_deterministic(run_dir, tmp_path):
    root, _ = run_dir
    cfg = _config(tmp_path / "again.yaml", tmp_path / "again")
    assert cli.main(["calibrate", "--config", cfg]) == cli.EXIT_OK
    for name in ("errors.csv", "qoi_table.csv"):
        assert (tmp_path / "again" / name).read_text() == (root / "out" / name).read_text()
