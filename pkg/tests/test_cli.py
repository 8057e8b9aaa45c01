import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from shadowflow.cli import EXIT_CONFIG, EXIT_FAILED_CHECK, EXIT_OK, build_report, main
from shadowflow.config import PRESETS, ConfigError, RunConfig, preset


def _summary(out, name):
    return json.loads((out / name / "summary.json").read_text())


def test_run_existence(tmp_path, capsys):
    assert main(["run", "--preset", "existence", "--out", str(tmp_path)]) == EXIT_OK
    s = _summary(tmp_path, "existence")
    assert s["outcome"] == "converged"
    assert s["end_report"]["index_at_infinity"] == 1
    assert all(v["ok"] for k, v in s["invariants"].items() if "ok" in v)
    # every default is written back for provenance
    assert s["config"]["flow"]["kappa_a"] == 4.0**27
    assert s["config"]["expansion"]["c_hat0"] == 1.0
    lines = (tmp_path / "existence" / "trajectory.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["event"] == "converged"
    assert "outcome=converged" in capsys.readouterr().out


def test_run_tower(tmp_path):
    assert main(["run", "--preset", "tower", "--out", str(tmp_path)]) == EXIT_OK
    s = _summary(tmp_path, "tower")
    assert s["outcome"] in ("exited_V", "t_max_reached")
    assert s["invariants"]["tower"]["is_tower_attempt"] is True
    assert s["invariants"]["tower"]["min_pair_floor"] > 0


def test_run_toy_and_t_max_flag(tmp_path):
    assert main(["run", "--preset", "toy", "--out", str(tmp_path)]) == EXIT_OK
    s = _summary(tmp_path, "toy")
    assert s["end_report"]["index_at_infinity"] == 0
    assert main(["run", "--preset", "off_critical", "--t-max", "1", "--out", str(tmp_path)]) == EXIT_OK
    s = _summary(tmp_path, "off_critical")
    assert s["outcome"] == "t_max_reached" and s["event"]["t"] == pytest.approx(1.0)


def test_hierarchy_violation_exit_2(tmp_path, capsys):
    cfg = preset("existence").to_dict(resolved=False)
    cfg["flow"] = {"kappa_a": 1e10}
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(cfg))
    assert main(["run", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "kappa_a" in err and "kappa_lambda^3" in err
    assert not (tmp_path / "existence").exists()


def test_config_problems_are_itemised():
    cfg = preset("existence")
    cfg.initial = {**cfg.initial, "lambda": [50.0, 5.0], "vnorm": 0.5}
    bad = cfg.problems()
    assert any("lambda_floor" in b for b in bad)
    assert any("vnorm" in b for b in bad) and any("1/lambda_min" in b for b in bad)
    with pytest.raises(ConfigError):
        cfg.validate()
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"name": "x", "bogus": 1})
    with pytest.raises(ConfigError):
        preset("nope")
    assert RunConfig(name="x", n=4).problems()


def test_nd_violation_reported():
    cfg = preset("existence")
    cfg.field = {"type": "cosine", "offset": 3.0, "coefficients": [1, 0, 0, 0, 0, 0]}
    assert any("field" in b for b in cfg.problems())


def test_config_roundtrip():
    for name in PRESETS:
        cfg = preset(name)
        for resolved in (False, True):
            text = cfg.to_yaml(resolved)
            again = RunConfig.from_yaml(text)
            assert again.to_yaml(resolved) == text
            assert RunConfig.from_yaml(again.to_yaml(resolved)).to_dict(resolved) == again.to_dict(resolved)


@pytest.mark.parametrize("n", range(5, 10))
def test_presets_self_validate(n):
    for name in PRESETS:
        assert preset(name, n=n).problems() == []


def test_list_presets_and_validate(tmp_path, capsys):
    assert main(["list-presets"]) == EXIT_OK
    out = capsys.readouterr().out
    assert all(name in out for name in PRESETS)
    assert main(["validate", "--preset", "tower", "--n", "7"]) == EXIT_OK
    p = tmp_path / "c.yaml"
    p.write_text(preset("saddle_negative_laplacian").to_yaml())
    assert main(["validate", "--config", str(p)]) == EXIT_OK


def test_dump_cutoffs(tmp_path):
    assert main(["run", "--preset", "existence", "--dump-cutoffs", "--out", str(tmp_path)]) == EXIT_OK
    rows = [json.loads(x) for x in (tmp_path / "existence" / "cutoffs.jsonl").read_text().splitlines()]
    assert rows[0]["t"] == 0.0
    assert {"eta_v", "eta_alpha", "eta_a", "eta_lam_ge", "eta_lam_le", "m_pair", "m_tower"} <= set(rows[0])


def _jittered_batch(tmp_path, k=10):
    cfg_dir = tmp_path / "configs"
    cfg_dir.mkdir()
    for seed in range(k):
        cfg = preset("existence", seed=seed)
        cfg.name = f"existence_s{seed:02d}"
        cfg.initial = {**cfg.initial, "jitter": 5e-4}
        (cfg_dir / f"{cfg.name}.yaml").write_text(cfg.to_yaml(resolved=False))
    return cfg_dir


def test_batch_jittered_existence(tmp_path):
    cfg_dir = _jittered_batch(tmp_path)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["batch", "--config", str(cfg_dir / "*.yaml"), "--jobs", "4", "--out", str(out1)]) == EXIT_OK
    assert main(["batch", "--config", str(cfg_dir / "*.yaml"), "--jobs", "1", "--out", str(out2)]) == EXIT_OK
    b1 = (out1 / "batch.csv").read_bytes()
    assert b1 == (out2 / "batch.csv").read_bytes()
    rows = list(csv.DictReader((out1 / "batch.csv").read_text().splitlines()))
    assert [r["run_id"] for r in rows] == sorted(r["run_id"] for r in rows)
    assert len(rows) == 10
    assert all(r["outcome"] == "converged" for r in rows)
    assert len({r["limit_points"] for r in rows}) == 1
    assert all(r["index_at_infinity"] == "1" for r in rows)
    # the jitter actually moved the initial centres
    starts = {json.dumps(_summary(out1, r["run_id"])["final_state"]["centers"]) for r in rows}
    assert len(starts) == 10


def test_batch_empty_glob(tmp_path):
    assert main(["batch", "--config", str(tmp_path / "none*.yaml"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_batch_propagates_child_code(tmp_path):
    cfg_dir = tmp_path / "c"
    cfg_dir.mkdir()
    (cfg_dir / "a.yaml").write_text(preset("saddle_negative_laplacian").to_yaml(False))
    bad = preset("existence").to_dict(resolved=False)
    bad["name"] = "bad"
    bad["flow"] = {"kappa_v": 2.0}
    (cfg_dir / "b.yaml").write_text(yaml.safe_dump(bad))
    assert main(["batch", "--config", str(cfg_dir / "*.yaml"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    rows = list(csv.DictReader((tmp_path / "o" / "batch.csv").read_text().splitlines()))
    assert [r["run_id"] for r in rows] == ["saddle_negative_laplacian"]


def test_report(tmp_path, capsys):
    empty = tmp_path / "empty"
    assert main(["report", "--out", str(empty)]) == EXIT_OK
    assert "nothing to report" in capsys.readouterr().out

    out = tmp_path / "runs"
    for name in ("existence", "tower", "saddle_negative_laplacian", "toy"):
        assert main(["run", "--preset", name, "--out", str(out)]) == EXIT_OK
    (out / "junk").mkdir()
    (out / "junk" / "summary.json").write_text("{not json")
    assert main(["report", "--out", str(out)]) == EXIT_OK
    text = (out / "report.md").read_text()
    assert "**FAIL**" not in text and "Unreadable run files" in text
    assert "| existence | converged | 1 |" in text

    s = json.loads((out / "tower" / "summary.json").read_text())
    s["invariants"]["energy_monotone"]["ok"] = False
    (out / "tower" / "summary.json").write_text(json.dumps(s))
    text, code = build_report(out)
    assert code == EXIT_FAILED_CHECK and "**FAIL**" in text
    assert main(["report", "--out", str(out)]) == EXIT_FAILED_CHECK


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "shadowflow", "run", "--preset", "saddle_negative_laplacian",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert _summary(tmp_path, "saddle_negative_laplacian")["outcome"] == "converged"
    r = subprocess.run([sys.executable, "-m", "shadowflow", "run", "--preset", "bogus"], capture_output=True)
    assert r.returncode == 2
    assert np.isfinite(_summary(tmp_path, "saddle_negative_laplacian")["event"]["t"])
