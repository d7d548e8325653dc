"""Config parsing, the run orchestrator, and the command-line surface."""
from __future__ import annotations

import json
import os

import numpy as np
import pytest

from squeezelab import cli, runner
from squeezelab.config import ExperimentConfig, parse_config_text
from squeezelab.errors import ConfigError


@pytest.fixture(scope="module")
def training_runs(tmp_path_factory):
    """Two identical tiny training runs in separate output directories."""
    root = tmp_path_factory.mktemp("runs")
    saved = os.environ.pop("SQUEEZELAB_SEED", None)
    dirs = []
    try:
        for name in ("a", "b"):
            out_dir = root / f"run_{name}"
            cfg = root / f"{name}.cfg"
            cfg.write_text(
                "mode = sps\n"
                "seed = 7\n"
                f"out_dir = {out_dir}\n"
                "suite.count = 4\n"
                "rl.steps_per_iteration = 2\n"
                "sps.max_iterations = 2\n"
                "sps.irl_steps_per_iteration = 2\n"
                "eval.n = 8\n"
                "eval.k = 1,4\n",
                encoding="utf-8")
            assert cli.main(["run", str(cfg)]) == 0
            dirs.append(out_dir)
    finally:
        if saved is not None:
            os.environ["SQUEEZELAB_SEED"] = saved
    return dirs


# ---------------------------------------------------------------------------
# config parsing


def test_parse_empty_text_gives_defaults():
    values = parse_config_text("")
    assert values["mode"] == "sps"
    assert values["seed"] == 1234
    assert values["eval.k"] == [1, 4, 8]
    assert values["rl.eps_low"] is None
    assert values["suite.skew"] == 4.0
    assert values["sps.quantile"] is None


def test_parse_rejects_unknown_key_with_line_number():
    with pytest.raises(ConfigError, match="line 2.*grop_size"):
        parse_config_text("seed = 1\nrl.grop_size = 8\n")


def test_parse_rejects_duplicates_and_bad_lines():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match="expected key = value"):
        parse_config_text("seed 1\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config_text("seed = abc\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config_text("sps.trace_metrics = maybe\n")


def test_parse_comments_blanks_and_option_values():
    values = parse_config_text(
        "# a comment\n"
        "\n"
        "sps.quantile = none\n"
        "rl.eps_low = 0.25\n"
        "rl.reuse_rollouts = yes\n"
        "eval.k = 1, 2 ,8\n")
    assert values["sps.quantile"] is None
    assert values["rl.eps_low"] == 0.25
    assert values["rl.reuse_rollouts"] is True
    assert values["eval.k"] == [1, 2, 8]


def test_parse_validates_cross_field_rules():
    with pytest.raises(ConfigError, match="mode"):
        parse_config_text("mode = warmup\n")
    with pytest.raises(ConfigError, match="rl.objective"):
        parse_config_text("rl.objective = ppo\n")
    with pytest.raises(ConfigError, match="eval.k"):
        parse_config_text("eval.k =\n")
    with pytest.raises(ConfigError, match="rl.scope"):
        parse_config_text("rl.scope = per_token\n")
    with pytest.raises(ConfigError, match="seed"):
        parse_config_text("seed = -1\n")


def test_config_text_round_trip():
    cfg = ExperimentConfig.from_dict({"seed": 9, "rl.objective": "dapo",
                                      "mode": "dapo", "sps.quantile": 0.25,
                                      "rl.eps_high": 0.3})
    reparsed = parse_config_text(cfg.to_text())
    assert reparsed == cfg.values


def test_with_value_is_functional():
    cfg = ExperimentConfig.from_dict()
    other = cfg.with_value("seed", 5)
    assert cfg["seed"] == 1234
    assert other["seed"] == 5
    with pytest.raises(ConfigError):
        cfg.with_value("seeed", 5)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"not.a.key": 1})


def test_clip_config_mapping():
    grpo = ExperimentConfig.from_dict().clip_config()
    assert (grpo.objective_kind, grpo.eps_low, grpo.eps_high, grpo.beta) == \
        ("grpo", 0.2, 0.2, 0.01)
    dapo = ExperimentConfig.from_dict(
        {"rl.objective": "dapo", "rl.eps_high": 0.3}).clip_config()
    assert (dapo.objective_kind, dapo.eps_low, dapo.eps_high) == ("dapo", 0.2, 0.3)
    gspo = ExperimentConfig.from_dict({"rl.objective": "gspo"}).clip_config()
    assert (gspo.objective_kind, gspo.eps_low, gspo.eps_high) == \
        ("gspo", 3e-4, 4e-4)
    tuned = ExperimentConfig.from_dict({"rl.beta": 0.0}).clip_config()
    assert tuned.beta == 0.0


def test_sps_and_family_mappings():
    cfg = ExperimentConfig.from_dict({"rl.group_size": 6, "sps.sampling_size": 2,
                                      "eval.prob_floor": 1e-3,
                                      "suite.count": 5, "suite.layer_width": 2})
    sps = cfg.sps_config()
    assert sps.group_size == 6
    assert sps.sampling_size == 2
    assert sps.trace_prob_floor == 1e-3
    assert sps.clip.objective_kind == "grpo"
    fam = cfg.family_params()
    assert fam.count == 5
    assert fam.layer_width == 2


# ---------------------------------------------------------------------------
# squeeze-demo and error handling


def test_squeeze_demo_reference_output(capsys):
    assert cli.main(["squeeze-demo"]) == 0
    out = capsys.readouterr().out
    assert "denominator 1 + p(m)(e^eta - 1) = 0.997179253" in out
    assert "scale factor Z/Z' = 1.002828726" in out
    assert out.count(": ok") == 5
    assert "FAILED" not in out


def test_squeeze_demo_rejects_non_squeeze_settings(capsys):
    assert cli.main(["squeeze-demo", "--eta", "0.5"]) == 1
    assert "error:" in capsys.readouterr().err
    assert cli.main(["squeeze-demo", "--m", "9"]) == 2
    assert "config error:" in capsys.readouterr().err
    assert cli.main(["squeeze-demo", "--logits", "a,b"]) == 2
    assert "--logits" in capsys.readouterr().err


def test_run_with_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("grop_size = 8\n", encoding="utf-8")
    assert cli.main(["run", str(cfg)]) == 2
    assert "grop_size" in capsys.readouterr().err


def test_eval_missing_checkpoint_exits_1(tmp_path, capsys):
    assert cli.main(["eval", str(tmp_path / "nope.txt"),
                     str(tmp_path / "suite.json")]) == 1
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# training runs and their artifacts


def test_run_writes_complete_artifact_directory(training_runs):
    run_dir = training_runs[0]
    names = sorted(p.name for p in run_dir.iterdir())
    assert names == [
        "checkpoint_base.txt", "checkpoint_best.txt", "checkpoint_final.txt",
        "checkpoint_iter001.txt", "checkpoint_iter002.txt", "checkpoints.csv",
        "eval_report.json", "histogram.csv", "manifest.json", "steps.csv",
        "suite.json", "trace.jsonl",
    ]
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert len(manifest["run_id"]) == 12
    assert manifest["config"]["seed"] == 7
    assert "manifest.json" in manifest["artifacts"]
    assert set(manifest["timings"]) == {"setup", "train", "eval"}
    trace_lines = (run_dir / "trace.jsonl").read_text().splitlines()
    assert len(trace_lines) == 8  # 2 iterations x (2 RL + 2 IRL)
    phases = [json.loads(line)["phase"] for line in trace_lines]
    assert phases == ["RL", "RL", "IRL", "IRL"] * 2
    steps = (run_dir / "steps.csv").read_text().splitlines()
    assert steps[0].startswith("step,objective_kind")
    assert len(steps) == 5


def test_identical_runs_are_byte_identical(training_runs):
    run_a, run_b = training_runs
    for name in ("trace.jsonl", "eval_report.json", "steps.csv",
                 "checkpoints.csv", "checkpoint_final.txt", "suite.json",
                 "histogram.csv"):
        assert (run_a / name).read_bytes() == (run_b / name).read_bytes(), name


def test_compare_run_against_its_twin(training_runs, capsys):
    run_a, run_b = training_runs
    assert cli.main(["compare", str(run_a), str(run_b)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "metric,run_a,run_b,delta"
    comparison = json.loads((run_a / "compare.json").read_text())
    assert comparison["delta"]
    assert all(v == 0.0 for v in comparison["delta"].values())
    csv_lines = (run_a / "compare.csv").read_text().splitlines()
    assert csv_lines[0] == "metric,run_a,run_b,delta"
    assert all(line.rsplit(",", 1)[1] == "0.0" for line in csv_lines[1:])


def test_best_checkpoint_tie_prefers_earliest(training_runs):
    import shutil
    run_dir = training_runs[0]
    twin = run_dir.parent / "tie_copy"
    if twin.exists():
        shutil.rmtree(twin)
    shutil.copytree(run_dir, twin)
    rows = (twin / "checkpoints.csv").read_text().splitlines()
    forced = [rows[0]] + [
        ",".join([line.split(",")[0], line.split(",")[1], "0.5"])
        for line in rows[1:]
    ]
    (twin / "checkpoints.csv").write_text("\n".join(forced) + "\n",
                                          encoding="utf-8")
    report = runner._best_checkpoint_report(str(twin))
    assert report["best_iter"] == 1
    assert report["best_checkpoint"] == "checkpoint_iter001.txt"


def test_eval_subcommand_round_trip(training_runs, tmp_path, capsys):
    run_dir = training_runs[0]
    out_file = tmp_path / "report.json"
    argv = ["eval", str(run_dir / "checkpoint_final.txt"),
            str(run_dir / "suite.json"), "--n", "8", "--k", "1,4",
            "--seed", "3", "--out", str(out_file)]
    assert cli.main(argv) == 0
    first = capsys.readouterr().out
    assert out_file.read_text() == first
    report = json.loads(first)
    assert report["n"] == 8
    assert set(report["pass_at_k"]) == {"1", "4"}
    assert cli.main(argv) == 0
    assert capsys.readouterr().out == first


def test_env_seed_override(tmp_path, monkeypatch):
    cfg = tmp_path / "demo.cfg"
    cfg.write_text(f"mode = squeeze-demo\nseed = 1\nout_dir = {tmp_path / 'out'}\n",
                   encoding="utf-8")
    monkeypatch.setenv("SQUEEZELAB_SEED", "99")
    manifest = runner.run(str(cfg))
    assert manifest.config["seed"] == 99
    payload = json.loads((tmp_path / "out" / "squeeze_report.json").read_text())
    assert all(c["passed"] for c in payload["checks"].values())
    monkeypatch.setenv("SQUEEZELAB_SEED", "not-a-number")
    with pytest.raises(ConfigError):
        runner.run(str(cfg))


def test_training_modes_pin_the_objective(tmp_path):
    out_dir = tmp_path / "dapo_out"
    cfg = tmp_path / "dapo.cfg"
    cfg.write_text(
        "mode = dapo\n"
        "seed = 3\n"
        f"out_dir = {out_dir}\n"
        "suite.count = 2\n"
        "rl.steps_per_iteration = 1\n"
        "sps.max_iterations = 1\n"
        "rl.dapo_max_resamples = 2\n"
        "eval.n = 4\n"
        "eval.k = 1\n",
        encoding="utf-8")
    manifest = runner.run(str(cfg))
    assert manifest.config["rl.objective"] == "dapo"
    steps = (out_dir / "steps.csv").read_text().splitlines()
    assert all(line.split(",")[1] == "dapo" for line in steps[1:])
