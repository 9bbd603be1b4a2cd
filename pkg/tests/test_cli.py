import csv
import hashlib
import json
import os

import jsonschema
import pytest

from advlane.cli import main

TINY_HYPER = {"ensemble_size": 1, "max_episodes": 2, "warmup": 24,
              "batch_size": 8, "buffer_size": 512}
TINY_ANALYSIS = {"rollout_episodes": 3, "eval_episodes": 10, "grid_bins": 10,
                 "k_hint": 1, "sweep_members": 1, "sweep_max_episodes": 2,
                 "sweep_eval_episodes": 5}


def write_config(tmp_path, **overrides):
    doc = {
        "output_dir": str(tmp_path / "out"),
        "base_seed": 0,
        "hyper": dict(TINY_HYPER),
        "ego": {"controller": "gap_acceptance"},
        "analysis": dict(TINY_ANALYSIS),
    }
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc, indent=1))
    return str(path)


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


# ---------------------------------------------------------------------------
# config validation


def test_missing_required_field_names_pointer(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"base_seed": 0}))
    code = main(["train-ego", "--config", str(path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "/output_dir" in err


def test_unknown_key_rejected(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(
        {"output_dir": "o", "base_seed": 0, "mystery_knob": 1}))
    code = main(["train-ego", "--config", str(path)])
    assert code == 2
    assert "mystery_knob" in capsys.readouterr().err


def test_bad_value_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(
        {"output_dir": "o", "base_seed": 0, "scenario": {"dt": 0.9}}))
    assert main(["train-ego", "--config", str(path)]) == 2


def test_malformed_json_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["train-ego", "--config", str(path)]) == 2


def test_presets_validate():
    from advlane.cli import _load_schema

    schema = _load_schema("run_config.schema.json")
    base = os.path.join(os.path.dirname(__file__), "..", "src", "advlane",
                        "presets")
    for name in ("desk.json", "paper.json"):
        with open(os.path.join(base, name)) as f:
            jsonschema.validate(json.load(f), schema)


# ---------------------------------------------------------------------------
# train-ego


def test_train_ego_gap_noop(tmp_path, capsys):
    cfgp = write_config(tmp_path)
    assert main(["train-ego", "--config", cfgp]) == 0
    out = capsys.readouterr().out
    assert "nothing to train" in out


def test_train_ego_dqn_writes_artifacts_and_hashes(tmp_path):
    cfgp = write_config(
        tmp_path,
        ego={"controller": "dqn",
             "dqn": {"max_episodes": 3, "warmup": 20, "batch_size": 16,
                     "success_window": 2, "success_threshold": 0.0,
                     "eps_anneal_episodes": 2}})
    assert main(["train-ego", "--config", cfgp]) == 0
    out = tmp_path / "out"
    weights = out / "ego" / "dqn_weights.json"
    curve = out / "ego" / "dqn_curve.csv"
    assert weights.exists() and curve.exists()
    manifest = json.loads((out / "train_ego_manifest.json").read_text())
    by_path = {a["path"]: a["sha256"] for a in manifest["artifacts"]}
    assert str(weights) in by_path
    assert by_path[str(weights)] == hashlib.sha256(
        read_bytes(weights)).hexdigest()


def test_train_ego_budget_exhaustion_exit_3(tmp_path):
    cfgp = write_config(
        tmp_path,
        ego={"controller": "dqn",
             "dqn": {"max_episodes": 3, "warmup": 20, "batch_size": 16,
                     "eps_anneal_episodes": 2}})  # window 50 > cap: no converge
    assert main(["train-ego", "--config", cfgp]) == 3
    assert (tmp_path / "out" / "ego" / "dqn_weights.json").exists()


# ---------------------------------------------------------------------------
# train-adversaries


def test_train_adversaries_single_member(tmp_path):
    cfgp = write_config(tmp_path)
    assert main(["train-adversaries", "--config", cfgp]) == 0
    out = tmp_path / "out" / "adversaries"
    assert (out / "member_000" / "actor.json").exists()
    index = json.loads((out / "index.json").read_text())
    assert index["members"][0]["status"] == "ok"


def test_train_adversaries_rerun_identical_index(tmp_path):
    cfgp = write_config(tmp_path)
    assert main(["train-adversaries", "--config", cfgp]) == 0
    index_path = tmp_path / "out" / "adversaries" / "index.json"
    first = hashlib.sha256(read_bytes(index_path)).hexdigest()
    assert main(["train-adversaries", "--config", cfgp]) == 0
    assert hashlib.sha256(read_bytes(index_path)).hexdigest() == first


def test_train_adversaries_resume_skips(tmp_path, capsys):
    cfgp = write_config(tmp_path)
    assert main(["train-adversaries", "--config", cfgp]) == 0
    capsys.readouterr()
    assert main(["train-adversaries", "--config", cfgp, "--resume"]) == 0
    assert "resumed" in capsys.readouterr().out


def test_train_adversaries_dqn_requires_weights(tmp_path):
    cfgp = write_config(tmp_path, ego={"controller": "dqn"})
    assert main(["train-adversaries", "--config", cfgp]) == 5


# ---------------------------------------------------------------------------
# evaluate


def trained_config(tmp_path):
    cfgp = write_config(tmp_path)
    assert main(["train-adversaries", "--config", cfgp]) == 0
    return cfgp


def test_evaluate_naturalistic_high_success(tmp_path):
    cfgp = write_config(
        tmp_path, analysis=dict(TINY_ANALYSIS, eval_episodes=60))
    assert main(["evaluate", "--config", cfgp,
                 "--adversary", "naturalistic"]) == 0
    with open(tmp_path / "out" / "eval" / "naturalistic.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    assert float(rows[0]["success_rate"]) >= 0.95
    rates = sum(float(rows[0][k]) for k in
                ("success_rate", "crash_rate", "timeout_rate"))
    assert rates == pytest.approx(1.0, abs=1e-9)


def test_evaluate_requires_ensemble(tmp_path):
    cfgp = write_config(tmp_path)
    assert main(["evaluate", "--config", cfgp]) == 5


def test_evaluate_unknown_member_exit5(tmp_path, capsys):
    cfgp = trained_config(tmp_path)
    capsys.readouterr()
    assert main(["evaluate", "--config", cfgp,
                 "--adversary", "member_7777"]) == 5
    assert "member_7777" in capsys.readouterr().err


def test_evaluate_deterministic_bytes(tmp_path):
    cfgp = trained_config(tmp_path)
    assert main(["evaluate", "--config", cfgp]) == 0
    members = tmp_path / "out" / "eval" / "members.csv"
    summary = tmp_path / "out" / "eval" / "summary.csv"
    m1, s1 = read_bytes(members), read_bytes(summary)
    assert main(["evaluate", "--config", cfgp]) == 0
    assert read_bytes(members) == m1
    assert read_bytes(summary) == s1


def test_evaluate_single_member_selection(tmp_path):
    cfgp = trained_config(tmp_path)
    assert main(["evaluate", "--config", cfgp, "--adversary", "0"]) == 0
    with open(tmp_path / "out" / "eval" / "members.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1 and rows[0]["policy"] == "member_000"


# ---------------------------------------------------------------------------
# cluster


def test_cluster_single_member_k1(tmp_path):
    cfgp = trained_config(tmp_path)
    assert main(["cluster", "--config", cfgp]) == 0
    out = tmp_path / "out" / "cluster"
    report = json.loads((out / "report.json").read_text())
    assert report["k"] == 1
    from advlane.cli import _load_schema

    jsonschema.validate(report, _load_schema("cluster_report.schema.json"))
    assert (out / "pca_scatter.svg").exists()
    assert (out / "cluster_1_heatmap.svg").exists()
    sizes = sum(c["size"] for c in report["clusters"])
    assert sizes == 1


def test_cluster_missing_ensemble_exit5(tmp_path):
    cfgp = write_config(tmp_path)
    assert main(["cluster", "--config", cfgp]) == 5


def test_cluster_deterministic_report(tmp_path):
    cfgp = trained_config(tmp_path)
    assert main(["cluster", "--config", cfgp]) == 0
    report = tmp_path / "out" / "cluster" / "report.json"
    first = read_bytes(report)
    assert main(["cluster", "--config", cfgp]) == 0
    assert read_bytes(report) == first


# ---------------------------------------------------------------------------
# beta sweep


def test_beta_sweep_rejects_single_value(tmp_path):
    cfgp = write_config(tmp_path)
    assert main(["beta-sweep", "--config", cfgp, "--betas", "1"]) == 2


def test_beta_sweep_rejects_nonpositive(tmp_path):
    cfgp = write_config(tmp_path)
    assert main(["beta-sweep", "--config", cfgp, "--betas", "0.5,-1"]) == 2


def test_beta_sweep_rows_sorted_ascending(tmp_path):
    cfgp = write_config(tmp_path)
    assert main(["beta-sweep", "--config", cfgp, "--betas", "2,0.5"]) == 0
    with open(tmp_path / "out" / "sweep" / "beta_sweep.csv") as f:
        rows = list(csv.DictReader(f))
    betas = [float(r["beta"]) for r in rows]
    assert betas == sorted(betas) == [0.5, 2.0]
    assert (tmp_path / "out" / "sweep" / "beta_sweep.svg").exists()


# ---------------------------------------------------------------------------
# plumbing


def test_output_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("ADVLANE_OUTPUT_ROOT", str(tmp_path / "root"))
    cfgp = write_config(tmp_path, output_dir="rel_out")
    assert main(["train-ego", "--config", cfgp]) == 0
    assert (tmp_path / "root" / "rel_out" / "train_ego_manifest.json").exists()


def test_output_dir_override(tmp_path):
    cfgp = write_config(tmp_path)
    other = tmp_path / "elsewhere"
    assert main(["train-ego", "--config", cfgp,
                 "--output-dir", str(other)]) == 0
    assert (other / "train_ego_manifest.json").exists()


def test_seed_override_changes_results(tmp_path):
    cfgp = write_config(tmp_path)
    assert main(["train-adversaries", "--config", cfgp]) == 0
    actor = tmp_path / "out" / "adversaries" / "member_000" / "actor.json"
    first = read_bytes(actor)
    assert main(["train-adversaries", "--config", cfgp, "--seed", "99"]) == 0
    assert read_bytes(actor) != first


def test_manifest_config_hash_matches(tmp_path):
    cfgp = write_config(tmp_path)
    assert main(["train-ego", "--config", cfgp]) == 0
    manifest = json.loads(
        (tmp_path / "out" / "train_ego_manifest.json").read_text())
    assert manifest["config_sha256"] == hashlib.sha256(
        read_bytes(cfgp)).hexdigest()
    assert manifest["exit_status"] == 0


def test_csv_headers_match_registry(tmp_path):
    from advlane.cli import _load_schema

    headers = _load_schema("csv_headers.json")
    cfgp = trained_config(tmp_path)
    assert main(["evaluate", "--config", cfgp]) == 0
    with open(tmp_path / "out" / "eval" / "members.csv") as f:
        assert next(csv.reader(f)) == headers["eval_members"]
    with open(tmp_path / "out" / "eval" / "summary.csv") as f:
        assert next(csv.reader(f)) == headers["eval_summary"]
    with open(tmp_path / "out" / "adversaries" / "member_000" /
              "curve.csv") as f:
        assert next(csv.reader(f)) == headers["adversary_curve"]
