import csv
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from regmarket.cli import ConfigError, main, parse_config

ROOT = Path(__file__).resolve().parents[1]

BASE = {
    "schema_version": 1,
    "seed": 0,
    "data": {"synthetic": {"true_weights": [1.0, 1.0], "feature_noise_std": 0.1, "length": 200},
             "known_model": True},
    "lift": {"conditioning": "observational"},
    "market": {"valuation": 0.5},
}


def write(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return p


def issues_of(doc):
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    return dict(exc.value.issues)


def test_field_paths_in_errors():
    assert "model.forgetting" in issues_of({**BASE, "model": {"forgetting": 1.5}})
    assert "market.valuation" in issues_of({**BASE, "market": {"valuation": -1}})
    assert "seed" in issues_of({k: v for k, v in BASE.items() if k != "seed"})
    assert "data" in issues_of({**BASE, "data": {"synthetic": BASE["data"]["synthetic"],
                                                 "wind_standin": {}}})
    assert "lift.bogus" in issues_of({**BASE, "lift": {"bogus": 1}})


def test_validate_exit_codes(tmp_path, capsys):
    assert main(["validate", str(write(tmp_path, BASE))]) == 0
    bad = write(tmp_path, {**BASE, "model": {"forgetting": 1.5}}, "bad.yaml")
    assert main(["validate", str(bad)]) == 2
    assert "model.forgetting" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.yaml")]) == 2


def test_run_without_attack_writes_no_verdict(tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(write(tmp_path, BASE)), "--out-dir", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["config.resolved.yaml", "ledger_honest.csv", "summary.txt"]
    resolved = yaml.safe_load((out / "config.resolved.yaml").read_text())
    assert resolved["model"]["forgetting"] == 0.999 and resolved["lift"]["mc_samples"] == 1000


def test_replication_demo_split(tmp_path):
    out = tmp_path / "out"
    cfg = {**BASE, "data": {**BASE["data"], "synthetic": {**BASE["data"]["synthetic"], "length": 2000}},
           "attack": {"attacker": "a2", "replicate_plan": {"x2": 1}}}
    assert main(["run", str(write(tmp_path, cfg)), "--out-dir", str(out)]) == 0
    rows = {r["agent"]: r for r in csv.DictReader((out / "verdict.csv").open())}
    assert float(rows["a2"]["reward_share"]) == pytest.approx(2 / 3, abs=0.02)
    assert float(rows["a1"]["reward_share"]) == pytest.approx(1 / 3, abs=0.02)
    assert rows["a2"]["classification"] == "not-robust"


def test_curve_all_methods(tmp_path):
    out = tmp_path / "out"
    cfg = {**BASE, "curve": {"attacker": "a2", "k_max": 2}}
    assert main(["curve", str(write(tmp_path, cfg)), "--out-dir", str(out)]) == 0
    wide = list(csv.reader((out / "curve_wide.csv").open()))
    assert wide[0] == ["K", "observational-shapley", "interventional-shapley",
                       "robust-shapley", "banzhaf"]
    assert not (out / "ledger_honest.csv").exists()
    assert main(["curve", str(write(tmp_path, BASE, "nocurve.yaml"))]) == 2


def test_runs_are_byte_identical(tmp_path):
    cfg = write(tmp_path, {**BASE, "attack": {"attacker": "a1", "replicate_plan": {"x1": 2}}})
    for d in ("a", "b"):
        assert main(["run", str(cfg), "--out-dir", str(tmp_path / d), "--seed", "3"]) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_runtime_error_exit_code(tmp_path):
    cfg = {**BASE, "market": {"train_window": [0, 500]}}
    assert main(["run", str(write(tmp_path, cfg)), "--out-dir", str(tmp_path / "o")]) == 3


def test_env_var_sets_default_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("REGMARKET_OUT_DIR", str(tmp_path / "env_out"))
    assert main(["run", str(write(tmp_path, BASE))]) == 0
    assert (tmp_path / "env_out" / "summary.txt").exists()


@pytest.mark.parametrize("name", ["replication_demo", "replication_sweep", "wind_standin"])
def test_shipped_configs_validate(name):
    assert main(["validate", str(ROOT / "configs" / f"{name}.yaml")]) == 0


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "regmarket", "validate", str(write(tmp_path, BASE))],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "valid" in res.stdout
