"""Config-driven experiment orchestration and artifact plumbing.

A run builds its task suite and base policy from the seed, executes the
requested training mode, and leaves a self-describing output directory:
suite, checkpoints, trace files, evaluation report, and a manifest embedding
the fully resolved config. Non-checkpoint artifacts are written under
`.partial` names and renamed only when the run completes, so a crashed run
is recognizable by its suffixes while the last checkpoint stays usable.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError, MissingArtifacts
from .metrics import (
    avg_at_k,
    evaluation_report,
    report_to_json,
    sample_matrix,
)
from .policy import derive_rng, load_checkpoint, save_checkpoint
from .sps import grpo_baseline_loop, sps_loop
from .squeeze import penalize_token, verify_squeeze
from .tasks import build_suite_policy, load_suite, make_benchmark_suite, save_suite

TRAIN_MODES = ("grpo", "dapo", "gspo", "sps")


@dataclass
class RunManifest:
    run_id: str
    config: dict
    artifacts: list[str] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def save(self, path) -> None:
        payload = {
            "run_id": self.run_id,
            "config": self.config,
            "artifacts": self.artifacts,
            "timings": self.timings,
        }
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


class _Artifacts:
    """Stage files as <name>.partial and rename them on success."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.staged: list[str] = []
        self.final: list[str] = []

    def write_text(self, name: str, text: str) -> None:
        with open(os.path.join(self.out_dir, name + ".partial"), "w",
                  encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.staged.append(name)

    def partial_path(self, name: str) -> str:
        self.staged.append(name)
        return os.path.join(self.out_dir, name + ".partial")

    def direct(self, name: str) -> str:
        self.final.append(name)
        return os.path.join(self.out_dir, name)

    def finalize(self) -> list[str]:
        for name in self.staged:
            os.replace(os.path.join(self.out_dir, name + ".partial"),
                       os.path.join(self.out_dir, name))
        return sorted(set(self.final + self.staged))


def _resolve_config(config) -> ExperimentConfig:
    if isinstance(config, ExperimentConfig):
        cfg = config
    else:
        cfg = ExperimentConfig.from_file(config)
    env_seed = os.environ.get("SQUEEZELAB_SEED")
    if env_seed is not None:
        try:
            cfg = cfg.with_value("seed", int(env_seed))
        except ValueError as exc:
            raise ConfigError(f"SQUEEZELAB_SEED: not an integer: {env_seed!r}") from exc
    return cfg


def run(config) -> RunManifest:
    """Execute one configured experiment and emit its artifact directory."""
    cfg = _resolve_config(config)
    mode = cfg["mode"]
    if mode in TRAIN_MODES and mode != "sps" and cfg["rl.objective"] != mode:
        cfg = cfg.with_value("rl.objective", mode)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    art = _Artifacts(out_dir)
    timings: dict[str, float] = {}
    if mode == "squeeze-demo":
        _run_squeeze_demo(cfg, art)
    elif mode == "eval":
        _run_eval(cfg, art, timings)
    else:
        _run_training(cfg, art, timings)
    artifacts = art.finalize()
    run_id = hashlib.sha256(cfg.to_text().encode("utf-8")).hexdigest()[:12]
    manifest = RunManifest(run_id=run_id, config=dict(cfg.values),
                           artifacts=artifacts + ["manifest.json"],
                           timings=timings)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def _run_squeeze_demo(cfg: ExperimentConfig, art: _Artifacts) -> None:
    logits = np.asarray(cfg["squeeze.logits"], dtype=float)
    m = cfg["squeeze.m"]
    eta = cfg["squeeze.eta"]
    if not 0 <= m < logits.shape[0]:
        raise ConfigError(f"squeeze.m: index {m} out of range for {logits.shape[0]} logits")
    _, report = penalize_token(logits, m, eta)
    checks = verify_squeeze(report)
    lines = [
        f"logits: {[float(v) for v in logits]}  m={m}  eta={eta}",
        f"p(m) before={report.before.probs[m]:.9f}  after={report.after.probs[m]:.9f}",
        f"denominator 1 + p(m)(e^eta - 1) = {report.denom:.9f}",
        f"scale factor Z/Z' = {report.scale_factor:.9f}",
        f"mass delta on m = {report.mass_delta[m]:.9f}",
    ]
    for check in checks:
        lines.append(f"check {check.name}: {'ok' if check.passed else 'FAILED'}"
                     f" (residual {check.residual:.3e})")
    print("\n".join(lines))
    payload = {
        "before": [float(p) for p in report.before.probs],
        "after": [float(p) for p in report.after.probs],
        "m": report.m,
        "eta": report.eta,
        "denom": report.denom,
        "scale_factor": report.scale_factor,
        "mass_delta": [float(d) for d in report.mass_delta],
        "checks": {c.name: {"passed": c.passed, "residual": c.residual}
                   for c in checks},
    }
    art.write_text("squeeze_report.json", json.dumps(payload, indent=2) + "\n")


def _run_eval(cfg: ExperimentConfig, art: _Artifacts, timings: dict) -> None:
    ckpt = cfg["eval.checkpoint"]
    suite_path = cfg["eval.suite_path"]
    if not ckpt or not suite_path:
        raise ConfigError("eval.checkpoint and eval.suite_path are required in eval mode")
    t0 = time.perf_counter()
    policy = load_checkpoint(ckpt)
    suite = load_suite(suite_path, vocab_size=policy.vocab.size)
    base = policy
    if cfg["eval.base_checkpoint"]:
        base = load_checkpoint(cfg["eval.base_checkpoint"])
    report = evaluation_report(
        policy, base, suite, cfg["suite.name"], cfg["eval.n"], cfg["eval.k"],
        cfg["eval.prob_floor"], derive_rng(cfg["seed"], 7200))
    art.write_text("eval_report.json", report_to_json(report))
    art.write_text("histogram.csv", _histogram_csv(report))
    timings["eval"] = time.perf_counter() - t0


def _histogram_csv(report: dict) -> str:
    lines = ["bucket,count"]
    for edge, count in zip(report["histogram"]["edges"], report["histogram"]["counts"]):
        lines.append(f"{edge},{count}")
    return "\n".join(lines) + "\n"


def _run_training(cfg: ExperimentConfig, art: _Artifacts, timings: dict) -> None:
    seed = cfg["seed"]
    mode = cfg["mode"]
    t0 = time.perf_counter()
    suite = make_benchmark_suite(seed, cfg.family_params())
    base = build_suite_policy(suite, cfg["suite.skew"], seed)
    save_suite(suite, art.partial_path("suite.json"))
    save_checkpoint(base, art.direct("checkpoint_base.txt"))
    timings["setup"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sps_cfg = cfg.sps_config()
    loop = sps_loop if mode == "sps" else grpo_baseline_loop
    final_policy, trace = loop(base, suite, sps_cfg, seed, out_dir=art.out_dir)
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    trace.save(art.partial_path("trace.jsonl"))
    trace.save_step_csv(art.partial_path("steps.csv"))
    save_checkpoint(final_policy, art.direct("checkpoint_final.txt"))

    rows = []
    for it in range(1, sps_cfg.max_iterations + 1):
        name = f"checkpoint_iter{it:03d}.txt"
        path = os.path.join(art.out_dir, name)
        if not os.path.exists(path):
            continue
        art.final.append(name)
        snapshot = load_checkpoint(path)
        matrix = sample_matrix(snapshot, suite, cfg["eval.n"],
                               derive_rng(seed, 7100, it))
        rows.append((it, name, avg_at_k(matrix)))
    if rows:
        best = max(rows, key=lambda r: (r[2], -r[0]))
        shutil.copyfile(os.path.join(art.out_dir, best[1]),
                        art.direct("checkpoint_best.txt"))
        csv_lines = ["iter,path,avg_at_k"]
        csv_lines += [f"{it},{name},{repr(avg)}" for it, name, avg in rows]
        art.write_text("checkpoints.csv", "\n".join(csv_lines) + "\n")

    report = evaluation_report(
        final_policy, base, suite, cfg["suite.name"], cfg["eval.n"],
        cfg["eval.k"], cfg["eval.prob_floor"], derive_rng(seed, 7200))
    art.write_text("eval_report.json", report_to_json(report))
    art.write_text("histogram.csv", _histogram_csv(report))
    timings["eval"] = time.perf_counter() - t0


COMPARED_METRICS = ("avg_at_k", "similarity_bigram_jaccard", "greedy_drift_mean",
                    "support_covered", "support_mass")


def _best_checkpoint_report(run_dir: str) -> dict:
    manifest_path = os.path.join(run_dir, "manifest.json")
    checkpoints_path = os.path.join(run_dir, "checkpoints.csv")
    suite_path = os.path.join(run_dir, "suite.json")
    for path in (manifest_path, checkpoints_path, suite_path):
        if not os.path.exists(path):
            raise MissingArtifacts(f"missing artifact: {path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        config = json.load(fh)["config"]
    with open(checkpoints_path, "r", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise MissingArtifacts(f"no checkpoints listed in {checkpoints_path}")
    best = max(rows, key=lambda r: (float(r["avg_at_k"]), -int(r["iter"])))
    policy = load_checkpoint(os.path.join(run_dir, best["path"]))
    suite = load_suite(suite_path, vocab_size=policy.vocab.size)
    base_path = os.path.join(run_dir, "checkpoint_base.txt")
    base = load_checkpoint(base_path) if os.path.exists(base_path) else policy
    report = evaluation_report(
        policy, base, suite, config["suite.name"], config["eval.n"],
        config["eval.k"], config["eval.prob_floor"],
        derive_rng(config["seed"], 7300))
    report["best_checkpoint"] = best["path"]
    report["best_iter"] = int(best["iter"])
    return report


def _flat_metrics(report: dict) -> dict[str, float]:
    flat = {f"pass_at_{k}": v for k, v in report["pass_at_k"].items()}
    flat["avg_at_k"] = report["avg_at_k"]
    flat["similarity_bigram_jaccard"] = report["similarity_bigram_jaccard"]
    flat["greedy_drift_mean"] = report["greedy_drift_mean"]
    flat["support_covered"] = float(report["support"]["covered"])
    flat["support_mass"] = report["support"]["mass"]
    return flat


def compare(run_a_dir: str, run_b_dir: str, out_dir: str | None = None) -> dict:
    """Tabulate two runs' best checkpoints side by side.

    Each run's best checkpoint is picked by Avg@k from its checkpoints.csv
    (ties to the earliest iteration); both are re-evaluated with their own
    stored config and seed, and per-metric deltas (a minus b) are written as
    compare.json and compare.csv into out_dir (default: run_a_dir).
    """
    report_a = _best_checkpoint_report(run_a_dir)
    report_b = _best_checkpoint_report(run_b_dir)
    flat_a = _flat_metrics(report_a)
    flat_b = _flat_metrics(report_b)
    metrics = sorted(set(flat_a) & set(flat_b))
    comparison = {
        "run_a": {"dir": run_a_dir, "best_checkpoint": report_a["best_checkpoint"],
                  "metrics": flat_a},
        "run_b": {"dir": run_b_dir, "best_checkpoint": report_b["best_checkpoint"],
                  "metrics": flat_b},
        "delta": {m: flat_a[m] - flat_b[m] for m in metrics},
    }
    dest = out_dir or run_a_dir
    os.makedirs(dest, exist_ok=True)
    with open(os.path.join(dest, "compare.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(comparison, fh, indent=2)
        fh.write("\n")
    lines = ["metric,run_a,run_b,delta"]
    for m in metrics:
        lines.append(f"{m},{repr(flat_a[m])},{repr(flat_b[m])},{repr(flat_a[m] - flat_b[m])}")
    with open(os.path.join(dest, "compare.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return comparison
