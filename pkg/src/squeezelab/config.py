"""Flat key=value experiment configuration.

The format is deliberately plain: one `section.key = value` per line, `#`
comments, no nesting beyond the dotted section prefix. Every key is checked
against the schema below before anything runs, so a typo like `grop_size`
fails loudly with the offending key named instead of silently training with
a default.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .errors import ConfigError
from .objectives import ClipConfig, DAPO, GRPO, GSPO
from .sps import SpsConfig
from .tasks import FamilyParams

MODES = ("grpo", "dapo", "gspo", "sps", "squeeze-demo", "eval")

_INT = "int"
_FLOAT = "float"
_STR = "str"
_BOOL = "bool"
_OPT_INT = "opt_int"
_OPT_FLOAT = "opt_float"
_INT_LIST = "int_list"
_FLOAT_LIST = "float_list"

# key -> (type tag, default)
SCHEMA: dict[str, tuple[str, Any]] = {
    "mode": (_STR, "sps"),
    "seed": (_INT, 1234),
    "out_dir": (_STR, "runs/out"),
    "suite.name": (_STR, "path-suite"),
    "suite.count": (_INT, 32),
    "suite.vocab_size": (_INT, 4),
    "suite.max_len": (_INT, 4),
    "suite.min_solutions": (_INT, 10),
    "suite.mid_layers": (_INT, 2),
    "suite.layer_width": (_INT, 3),
    "suite.edge_density": (_FLOAT, 0.95),
    "suite.decoy_count": (_INT, 1),
    "suite.skew": (_FLOAT, 4.0),
    "rl.objective": (_STR, GRPO),
    "rl.eps_low": (_OPT_FLOAT, None),
    "rl.eps_high": (_OPT_FLOAT, None),
    "rl.beta": (_OPT_FLOAT, None),
    "rl.lr": (_FLOAT, 0.05),
    "rl.group_size": (_INT, 8),
    "rl.steps_per_iteration": (_INT, 4),
    "rl.scope": (_STR, "per_prompt"),
    "rl.reuse_rollouts": (_BOOL, False),
    "rl.dapo_max_resamples": (_INT, 0),
    "sps.sampling_size": (_INT, 3),
    "sps.irl_steps_per_iteration": (_INT, 4),
    "sps.irl_lr": (_FLOAT, 0.005),
    "sps.irl_batch_size": (_OPT_INT, None),
    "sps.quantile": (_OPT_FLOAT, None),
    "sps.min_negatives": (_INT, 1),
    "sps.max_iterations": (_INT, 8),
    "sps.irl_scope": (_STR, "per_prompt"),
    "sps.l2te_raw_total": (_BOOL, False),
    "sps.convergence_epsilon": (_OPT_FLOAT, None),
    "sps.holdout_count": (_INT, 0),
    "sps.trace_metrics": (_BOOL, False),
    "sps.checkpoint_every": (_INT, 1),
    "eval.n": (_INT, 32),
    "eval.k": (_INT_LIST, [1, 4, 8]),
    "eval.prob_floor": (_FLOAT, 1e-4),
    "eval.checkpoint": (_STR, ""),
    "eval.suite_path": (_STR, ""),
    "eval.base_checkpoint": (_STR, ""),
    "squeeze.logits": (_FLOAT_LIST, [2.0, 1.0, 0.0, -3.0]),
    "squeeze.m": (_INT, 3),
    "squeeze.eta": (_FLOAT, -1.0),
    "runtime.workers": (_INT, 0),
}


def _parse_value(key: str, tag: str, raw: str):
    raw = raw.strip()
    try:
        if tag in (_OPT_INT, _OPT_FLOAT) and raw.lower() in ("none", ""):
            return None
        if tag in (_INT, _OPT_INT):
            return int(raw)
        if tag in (_FLOAT, _OPT_FLOAT):
            return float(raw)
        if tag == _BOOL:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tag == _INT_LIST:
            return [int(p) for p in raw.split(",") if p.strip()]
        if tag == _FLOAT_LIST:
            return [float(p) for p in raw.split(",") if p.strip()]
        return raw.strip("\"'")
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse value {raw!r} as {tag}") from exc


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse key=value lines into a fully defaulted, validated mapping."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        seen.add(key)
        values[key] = _parse_value(key, SCHEMA[key][0], raw)
    _validate(values)
    return values


def _validate(values: dict[str, Any]) -> None:
    if values["mode"] not in MODES:
        raise ConfigError(f"mode: must be one of {MODES}, got {values['mode']!r}")
    if values["rl.objective"] not in (GRPO, DAPO, GSPO):
        raise ConfigError(f"rl.objective: unknown objective {values['rl.objective']!r}")
    if values["seed"] < 0:
        raise ConfigError("seed: must be >= 0")
    if values["eval.n"] < 1:
        raise ConfigError("eval.n: must be >= 1")
    if not values["eval.k"]:
        raise ConfigError("eval.k: need at least one k")
    if any(k < 1 for k in values["eval.k"]):
        raise ConfigError("eval.k: every k must be >= 1")
    if values["eval.prob_floor"] < 0:
        raise ConfigError("eval.prob_floor: must be >= 0")
    if values["runtime.workers"] < 0:
        raise ConfigError("runtime.workers: must be >= 0")
    for key in ("rl.scope", "sps.irl_scope"):
        if values[key] not in ("per_prompt", "full_suite"):
            raise ConfigError(f"{key}: must be per_prompt or full_suite")


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration with every default materialized."""

    values: dict[str, Any]

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        return ExperimentConfig(parse_config_text(text))

    @staticmethod
    def from_dict(overrides: dict[str, Any] | None = None) -> "ExperimentConfig":
        values = {key: default for key, (_, default) in SCHEMA.items()}
        for key, val in (overrides or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = val
        _validate(values)
        return ExperimentConfig(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def with_value(self, key: str, value) -> "ExperimentConfig":
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        updated = dict(self.values)
        updated[key] = value
        return ExperimentConfig(updated)

    def clip_config(self) -> ClipConfig:
        kind = self.values["rl.objective"]
        eps_low = self.values["rl.eps_low"]
        eps_high = self.values["rl.eps_high"]
        beta = self.values["rl.beta"]
        if kind == GRPO:
            return ClipConfig.grpo(
                eps=0.2 if eps_low is None else eps_low,
                beta=0.01 if beta is None else beta)
        if kind == DAPO:
            return ClipConfig.dapo(
                eps_low=0.2 if eps_low is None else eps_low,
                eps_high=0.28 if eps_high is None else eps_high)
        return ClipConfig.gspo(
            eps_low=3e-4 if eps_low is None else eps_low,
            eps_high=4e-4 if eps_high is None else eps_high)

    def sps_config(self) -> SpsConfig:
        v = self.values
        return SpsConfig(
            group_size=v["rl.group_size"],
            sampling_size=v["sps.sampling_size"],
            irl_steps_per_iteration=v["sps.irl_steps_per_iteration"],
            irl_batch_size=v["sps.irl_batch_size"],
            rl_steps_per_iteration=v["rl.steps_per_iteration"],
            rl_lr=v["rl.lr"],
            irl_lr=v["sps.irl_lr"],
            quantile=v["sps.quantile"],
            min_negatives_for_pure_l2te=v["sps.min_negatives"],
            max_iterations=v["sps.max_iterations"],
            clip=self.clip_config(),
            l2te_raw_total=v["sps.l2te_raw_total"],
            rl_scope=v["rl.scope"],
            irl_scope=v["sps.irl_scope"],
            dapo_max_resamples=v["rl.dapo_max_resamples"],
            reuse_rollouts=v["rl.reuse_rollouts"],
            convergence_epsilon=v["sps.convergence_epsilon"],
            holdout_count=v["sps.holdout_count"],
            trace_metrics=v["sps.trace_metrics"],
            trace_prob_floor=v["eval.prob_floor"],
            checkpoint_every=v["sps.checkpoint_every"],
        )

    def family_params(self) -> FamilyParams:
        v = self.values
        return FamilyParams(
            count=v["suite.count"],
            vocab_size=v["suite.vocab_size"],
            max_len=v["suite.max_len"],
            min_solutions=v["suite.min_solutions"],
            mid_layers=v["suite.mid_layers"],
            layer_width=v["suite.layer_width"],
            edge_density=v["suite.edge_density"],
            decoy_count=v["suite.decoy_count"],
        )

    def to_text(self) -> str:
        lines = []
        for key in SCHEMA:
            val = self.values[key]
            if val is None:
                rendered = "none"
            elif isinstance(val, bool):
                rendered = "true" if val else "false"
            elif isinstance(val, list):
                rendered = ",".join(str(p) for p in val)
            else:
                rendered = str(val)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"
