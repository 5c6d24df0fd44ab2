import json

import pytest

from mobiforge.cli import main
from mobiforge.config import (ConfigError, config_hash, default_config,
                              load_config, validate_config)

TINY = [
    "--set", "city.n_regions=25",
    "--set", "data.n_agents=60",
    "--set", "planner.epochs=5",
    "--set", "embedding.epochs=2",
    "--set", "embedding.out_dim=32",
    "--set", "generator.d_model=32",
    "--set", "generator.heads=4",
    "--set", "generator.ffn=64",
    "--set", "generator.blocks=2",
    "--set", "generator.train_steps=60",
    "--set", "generator.diffusion_steps=20",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("ws")
    assert main(["e2e", "--out", str(ws), *TINY]) == 0
    return ws


# ---------------------------------------------------------------------------
# Config handling

def test_default_config_validates():
    cfg = validate_config(default_config())
    assert cfg["planner"]["k"] == 8


def test_unknown_field_names_path():
    with pytest.raises(ConfigError, match="planner.bogus"):
        validate_config({"planner": {"bogus": 1}})
    with pytest.raises(ConfigError, match="nosuch"):
        validate_config({"nosuch": {}})


def test_type_and_range_errors_name_path():
    with pytest.raises(ConfigError, match="city.n_regions"):
        validate_config({"city": {"n_regions": "many"}})
    with pytest.raises(ConfigError, match="data.deviation"):
        validate_config({"data": {"deviation": 1.5}})
    with pytest.raises(ConfigError, match="generator.d_model"):
        validate_config({"generator": {"d_model": 64}})


def test_overrides_parse_json_values(tmp_path):
    cfg = load_config(None, ["seeds.master=7", "embedding.dilations=[1,1,1]",
                             "city.distance_mode=haversine"])
    assert cfg["seeds"]["master"] == 7
    assert cfg["embedding"]["dilations"] == [1, 1, 1]
    assert cfg["city"]["distance_mode"] == "haversine"
    with pytest.raises(ConfigError, match="key=value"):
        load_config(None, ["seeds.master"])


def test_config_hash_is_stable_and_sensitive():
    a = validate_config(default_config())
    b = validate_config(default_config())
    assert config_hash(a) == config_hash(b)
    b["seeds"]["master"] = 99
    assert config_hash(a) != config_hash(b)


def test_config_error_exit_code(capsys):
    assert main(["e2e", "--set", "planner.k=0"]) == 2
    assert "config error" in capsys.readouterr().err


def test_show_config_prints_merged(capsys):
    assert main(["show-config", "--set", "seeds.master=3"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["seeds"]["master"] == 3
    assert doc["planner"]["k"] == 8


def test_missing_config_file_exit_code(capsys):
    assert main(["e2e", "--config", "/nonexistent/cfg.json"]) == 2


# ---------------------------------------------------------------------------
# Stage orchestration

def test_generate_without_training_is_dependency_error(tmp_path, capsys):
    code = main(["generate", "--out", str(tmp_path), *TINY])
    assert code == 3
    err = capsys.readouterr().err
    assert "train-gen" in err or "synth-data" in err


def test_evaluate_without_generate_is_dependency_error(tmp_path, capsys):
    assert main(["synth-data", "--out", str(tmp_path), *TINY]) == 0
    code = main(["evaluate", "--out", str(tmp_path), *TINY])
    assert code == 3
    assert "generate" in capsys.readouterr().err


def test_partition_without_seeds_csv_is_dependency_error(tmp_path, capsys):
    assert main(["partition", "--out", str(tmp_path), *TINY]) == 3
    assert "seeds_csv" in capsys.readouterr().err


def test_corrupt_artifact_is_runtime_error(tmp_path, capsys):
    assert main(["synth-data", "--out", str(tmp_path), *TINY]) == 0
    (tmp_path / "synth_data" / "train.csv").write_text("garbage\n")
    assert main(["train-planner", "--out", str(tmp_path), *TINY]) == 4
    assert "runtime error" in capsys.readouterr().err


def test_e2e_emits_reports_and_figures(workspace):
    ev = workspace / "evaluate"
    doc = json.loads((ev / "metrics.json").read_text())
    for key in ("distance_jsd", "radius_jsd", "locnum_jsd", "grank_jsd",
                "rrank_jsd", "cpc", "config_hash"):
        assert key in doc
    assert (ev / "histograms.png").exists()
    assert (ev / "jsd_summary.png").exists()
    assert (ev / "distance_real.csv").exists()
    assert (workspace / "audit" / "attack.json").exists()
    assert (workspace / "audit" / "similarity.png").exists()


def test_manifests_record_provenance(workspace):
    body = json.loads((workspace / "synth_data" / "manifest.json").read_text())
    assert body["stage"] == "synth-data"
    assert body["seed"] == 0
    assert body["wall_time_s"] >= 0
    assert "config_hash" in body and "input_hashes" in body


def test_rerun_is_noop_and_force_reruns(workspace, capsys):
    assert main(["e2e", "--out", str(workspace), *TINY]) == 0
    out = capsys.readouterr().out
    assert "skipped synth-data" in out and "skipped audit" in out
    assert not any(line.startswith("ran ") for line in out.splitlines())
    assert main(["synth-data", "--out", str(workspace), "--force", *TINY]) == 0
    assert "ran synth-data" in capsys.readouterr().out


def test_config_change_invalidates_stage(workspace, capsys):
    args = [a if a != "data.n_agents=60" else "data.n_agents=61" for a in TINY]
    assert main(["synth-data", "--out", str(workspace), *args]) == 0
    assert "ran synth-data" in capsys.readouterr().out
    # restore the original artifacts for other tests
    assert main(["synth-data", "--out", str(workspace), *TINY]) == 0


def test_determinism_byte_identical_metrics(tmp_path_factory):
    a = tmp_path_factory.mktemp("da")
    b = tmp_path_factory.mktemp("db")
    assert main(["e2e", "--out", str(a), *TINY]) == 0
    assert main(["e2e", "--out", str(b), *TINY]) == 0
    ma = (a / "evaluate" / "metrics.json").read_bytes()
    mb = (b / "evaluate" / "metrics.json").read_bytes()
    assert ma == mb
