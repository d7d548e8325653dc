"""Command-line entry points: run, compare, eval, squeeze-demo."""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import runner
from .errors import ConfigError, SqueezeLabError
from .metrics import evaluation_report, report_to_json
from .policy import derive_rng, load_checkpoint
from .squeeze import penalize_token, verify_squeeze
from .tasks import load_suite


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="squeezelab",
        description="Desk-scale RL squeezing experiments: training loops, "
                    "evaluation, and closed-form demos.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one configured experiment")
    run_p.add_argument("config", help="path to a key=value config file")

    cmp_p = sub.add_parser("compare", help="compare two finished runs")
    cmp_p.add_argument("run_a")
    cmp_p.add_argument("run_b")
    cmp_p.add_argument("--out", default=None, help="output directory (default: run_a)")

    eval_p = sub.add_parser("eval", help="evaluate a checkpoint on a suite")
    eval_p.add_argument("checkpoint")
    eval_p.add_argument("suite")
    eval_p.add_argument("--n", type=int, default=32, help="samples per prompt")
    eval_p.add_argument("--k", default="1,4,8", help="comma-separated k values")
    eval_p.add_argument("--prob-floor", type=float, default=1e-4)
    eval_p.add_argument("--seed", type=int, default=0)
    eval_p.add_argument("--base", default=None,
                        help="base checkpoint for greedy drift (default: the checkpoint itself)")
    eval_p.add_argument("--out", default=None, help="write the JSON report here")

    sq_p = sub.add_parser("squeeze-demo",
                          help="show the closed-form effect of one negative logit update")
    sq_p.add_argument("--logits", default="2,1,0,-3",
                      help="comma-separated logit vector")
    sq_p.add_argument("--m", type=int, default=3, help="index of the penalized token")
    sq_p.add_argument("--eta", type=float, default=-1.0, help="logit increment (negative)")
    return parser


def _cmd_run(args) -> int:
    manifest = runner.run(args.config)
    print(f"run {manifest.run_id} complete: {len(manifest.artifacts)} artifacts "
          f"in {manifest.config['out_dir']}")
    return 0


def _cmd_compare(args) -> int:
    comparison = runner.compare(args.run_a, args.run_b, args.out)
    print("metric,run_a,run_b,delta")
    metrics_a = comparison["run_a"]["metrics"]
    metrics_b = comparison["run_b"]["metrics"]
    for name, delta in comparison["delta"].items():
        print(f"{name},{metrics_a[name]},{metrics_b[name]},{delta}")
    return 0


def _cmd_eval(args) -> int:
    policy = load_checkpoint(args.checkpoint)
    suite = load_suite(args.suite, vocab_size=policy.vocab.size)
    base = load_checkpoint(args.base) if args.base else policy
    ks = [int(p) for p in args.k.split(",") if p.strip()]
    if not ks:
        raise ConfigError("--k: need at least one k value")
    report = evaluation_report(
        policy, base, suite, os.path.basename(args.suite), args.n, ks,
        args.prob_floor, derive_rng(args.seed, 7200))
    text = report_to_json(report)
    print(text, end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return 0


def _cmd_squeeze_demo(args) -> int:
    try:
        logits = np.asarray([float(p) for p in args.logits.split(",") if p.strip()])
    except ValueError:
        raise ConfigError(f"--logits: expected comma-separated numbers, got {args.logits!r}")
    if logits.size < 2:
        raise ConfigError("--logits: need at least two values")
    if not 0 <= args.m < logits.size:
        raise ConfigError(f"--m: index {args.m} out of range for {logits.size} logits")
    _, report = penalize_token(logits, args.m, args.eta)
    checks = verify_squeeze(report)
    print(f"logits: {[float(v) for v in logits]}  m={args.m}  eta={args.eta}")
    print(f"before: {[round(float(p), 9) for p in report.before.probs]}")
    print(f"after:  {[round(float(p), 9) for p in report.after.probs]}")
    print(f"denominator 1 + p(m)(e^eta - 1) = {report.denom:.9f}")
    print(f"scale factor Z/Z' = {report.scale_factor:.9f}")
    print(f"mass delta on m = {report.mass_delta[args.m]:.9f}")
    for check in checks:
        status = "ok" if check.passed else "FAILED"
        print(f"check {check.name}: {status} (residual {check.residual:.3e})")
    return 0 if all(c.passed for c in checks) else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "compare": _cmd_compare,
        "eval": _cmd_eval,
        "squeeze-demo": _cmd_squeeze_demo,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SqueezeLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
