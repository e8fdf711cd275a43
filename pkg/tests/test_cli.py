import csv

import yaml
from click.testing import CliRunner

from cmmsim.cli import main
from cmmsim.config import FIELD_NAMES


def write_config(tmp_path, doc):
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def test_run_writes_three_reports(tmp_path):
    cfg = write_config(tmp_path, {"n_vehicles": 3, "n_steps": 10, "comm_range_m": 2000.0})
    out = tmp_path / "out"
    res = CliRunner().invoke(main, ["run", "--config", str(cfg), "--out", str(out), "--seeds", "2",
                                    "--fusion", "constant_alpha(0.4)"])
    assert res.exit_code == 0, res.output
    assert {p.name for p in out.iterdir()} == {"steps.csv", "summary.csv", "links.csv"}
    with open(out / "summary.csv", newline="") as fh:
        assert {r["mechanism"] for r in csv.DictReader(fh)} == {"constant_alpha(0.4)"}
    assert "rmse" in res.output


def test_run_mode_override(tmp_path):
    cfg = write_config(tmp_path, {"n_vehicles": 3, "n_steps": 10, "comm_range_m": 2000.0})
    res = CliRunner().invoke(main, ["run", "--config", str(cfg), "--out", str(tmp_path / "o"),
                                    "--mode", "full_dynamic"])
    assert res.exit_code == 0, res.output
    res = CliRunner().invoke(main, ["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--mode", "warp"])
    assert res.exit_code != 0 and "mode" in res.output


def test_validate_ok_and_unknown_key(tmp_path):
    good = write_config(tmp_path, {"n_vehicles": 5})
    res = CliRunner().invoke(main, ["validate", "--config", str(good)])
    assert res.exit_code == 0 and "ok" in res.output
    bad = write_config(tmp_path, {"n_vehicles": 5, "turbo": True})
    res = CliRunner().invoke(main, ["validate", "--config", str(bad)])
    assert res.exit_code != 0 and "turbo" in res.output


def test_run_rejects_unknown_key(tmp_path):
    bad = write_config(tmp_path, {"turbo": True})
    res = CliRunner().invoke(main, ["run", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert res.exit_code != 0 and "turbo" in res.output
    assert not (tmp_path / "o").exists()


def test_missing_and_malformed_config(tmp_path):
    res = CliRunner().invoke(main, ["validate", "--config", str(tmp_path / "nope.yaml")])
    assert res.exit_code != 0 and "not found" in res.output
    broken = tmp_path / "broken.yaml"
    broken.write_text("a: [1,\n")
    res = CliRunner().invoke(main, ["validate", "--config", str(broken)])
    assert res.exit_code != 0 and "YAML" in res.output


def test_synth_map_then_use_it(tmp_path):
    res = CliRunner().invoke(main, ["synth-map", "--out", str(tmp_path / "grid.yaml"), "--extent", "1000"])
    assert res.exit_code == 0, res.output
    cfg = write_config(tmp_path, {"map": "grid.yaml", "n_vehicles": 2, "n_steps": 5})
    res = CliRunner().invoke(main, ["validate", "--config", str(cfg)])
    assert res.exit_code == 0, res.output


def test_config_keys_lists_fields():
    res = CliRunner().invoke(main, ["config-keys"])
    assert res.output.split() == list(FIELD_NAMES)
