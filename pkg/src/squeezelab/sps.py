"""Self-play squeezing countermeasure: RL phases alternated with an IRL stage.

Each iteration collects grouped rollouts with one of the clipped objectives,
selects a small demonstration set per prompt from the lowest-likelihood
rollouts (L2TE), and fits the policy to those demos by gradient descent on
their mean negative log-likelihood. Fitting a degenerate empirical
distribution over the demos is exactly maximizing demo likelihood, which
pushes probability mass back toward trajectories the RL phase squeezed down.
A baseline loop with the IRL stage disabled shares every other code path so
the two runs differ only by that stage.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoRollouts
from .metrics import sample_matrix, avg_at_k, support_coverage, pass_at_k_unbiased
from .objectives import (
    ClipConfig,
    PoolEntry,
    RolloutGroup,
    StepRecord,
    rl_step,
)
from .policy import (
    PolicyTable,
    SparseGradient,
    Trajectory,
    _log_probs,
    apply_update,
    derive_rng,
    entropy,
    greedy_decode,
    save_checkpoint,
    trajectory_log_prob,
)

LOW_LIKELIHOOD = "low_likelihood"
POSITIVE_AUGMENT = "positive_augment"
IRL_SCOPES = ("per_prompt", "full_suite")


@dataclass(frozen=True)
class SpsConfig:
    """Schedule and stage constants for the alternating loop.

    rl_scope and irl_scope control how batch averaging meets the per-prompt
    parameter blocks. The blocks are disjoint, so a full-batch mean scales
    every prompt's gradient by 1/prompts and the stated learning rates would
    do nothing observable at suite size; "per_prompt" (the default for both)
    makes each rate a per-prompt rate. For IRL it runs the descent prompt by
    prompt on that prompt's own demos; "full_suite" averages the loss over
    every selected demo at once.
    """

    group_size: int = 8
    sampling_size: int = 3
    irl_steps_per_iteration: int = 4
    irl_batch_size: int | None = None
    rl_steps_per_iteration: int = 4
    rl_lr: float = 0.05
    irl_lr: float = 0.005
    quantile: float | None = None
    min_negatives_for_pure_l2te: int = 1
    max_iterations: int = 8
    clip: ClipConfig = field(default_factory=ClipConfig.grpo)
    l2te_raw_total: bool = False
    rl_scope: str = "per_prompt"
    irl_scope: str = "per_prompt"
    dapo_max_resamples: int = 0
    reuse_rollouts: bool = False
    convergence_epsilon: float | None = None
    holdout_count: int = 0
    convergence_eval_n: int = 16
    trace_metrics: bool = False
    trace_eval_n: int = 8
    trace_pass_k: int = 3
    trace_prob_floor: float = 1e-4
    checkpoint_every: int = 1

    def __post_init__(self):
        if not 1 <= self.sampling_size <= self.group_size:
            raise ValueError("need 1 <= sampling_size <= group_size")
        if self.irl_steps_per_iteration < 0:
            raise ValueError("irl_steps_per_iteration must be >= 0")
        if self.rl_steps_per_iteration < 1:
            raise ValueError("rl_steps_per_iteration must be >= 1")
        if self.quantile is not None and not 0 < self.quantile <= 1:
            raise ValueError("quantile must satisfy 0 < q <= 1")
        if self.irl_scope not in IRL_SCOPES:
            raise ValueError(f"irl_scope must be one of {IRL_SCOPES}")
        if self.rl_scope not in IRL_SCOPES:
            raise ValueError(f"rl_scope must be one of {IRL_SCOPES}")
        if self.min_negatives_for_pure_l2te < 0:
            raise ValueError("min_negatives_for_pure_l2te must be >= 0")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.rl_lr < 0 or self.irl_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.holdout_count < 0:
            raise ValueError("holdout_count must be >= 0")


class RolloutPool:
    """Per-iteration buffer of rollouts in insertion order."""

    def __init__(self):
        self.entries: list[PoolEntry] = []

    def extend(self, entries) -> None:
        self.entries.extend(entries)

    def for_prompt(self, prompt_id: int) -> list[PoolEntry]:
        return [e for e in self.entries if e.prompt_id == prompt_id]

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class DemoEntry:
    prompt_id: int
    trajectory: Trajectory
    normalized_logp: float
    quantile_rank: float
    source: str


@dataclass(frozen=True)
class DemoSet:
    entries: tuple[DemoEntry, ...]

    @property
    def trajectories(self) -> tuple[Trajectory, ...]:
        return tuple(e.trajectory for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def _l2te_key(entry: PoolEntry, raw_total: bool) -> float:
    if raw_total:
        return entry.behavior_total_logp
    return entry.behavior_total_logp / max(len(entry.trajectory.tokens), 1)


def l2te_select(pool: RolloutPool, prompt_id: int, cfg: SpsConfig) -> DemoSet:
    """Pick the k lowest-likelihood rollouts for one prompt as IRL demos.

    Candidates are ranked by length-normalized behavior log-prob ascending
    (ties keep insertion order). With enough negative-reward rollouts around
    (>= min_negatives_for_pure_l2te) the bottom k are taken as they come;
    otherwise every available negative is taken and the lowest-ranked
    positive-reward rollouts fill up the remaining slots, marked
    positive_augment. A quantile q widens or narrows the candidate window
    to the bottom ceil(q*n) ranks (never below k, so the set stays full).
    """
    cands = pool.for_prompt(prompt_id)
    if not cands:
        raise NoRollouts(f"no rollouts pooled for prompt {prompt_id}")
    n = len(cands)
    k = min(cfg.sampling_size, n)
    order = sorted(range(n), key=lambda i: _l2te_key(cands[i], cfg.l2te_raw_total))
    rank_of = {idx: pos for pos, idx in enumerate(order)}
    if cfg.quantile is not None:
        window = order[:max(k, math.ceil(cfg.quantile * n))]
    else:
        window = order
    negatives = [i for i in window if cands[i].reward == 0]
    if len(negatives) >= cfg.min_negatives_for_pure_l2te:
        chosen = [(i, LOW_LIKELIHOOD) for i in window[:k]]
    else:
        chosen = [(i, LOW_LIKELIHOOD) for i in negatives[:k]]
        positives = [i for i in window if cands[i].reward == 1]
        for i in positives:
            if len(chosen) >= k:
                break
            chosen.append((i, POSITIVE_AUGMENT))
    denom = max(n - 1, 1)
    entries = tuple(
        DemoEntry(
            prompt_id=prompt_id,
            trajectory=cands[i].trajectory,
            normalized_logp=_l2te_key(cands[i], cfg.l2te_raw_total),
            quantile_rank=rank_of[i] / denom,
            source=src,
        )
        for i, src in chosen
    )
    return DemoSet(entries)


def _demo_pairs(demos):
    """Normalize the accepted demo shapes to (prompt_id, Trajectory) pairs."""
    if isinstance(demos, DemoSet):
        items = demos.entries
    else:
        items = list(demos)
    pairs = []
    for item in items:
        if isinstance(item, DemoEntry):
            pairs.append((item.prompt_id, item.trajectory))
        elif isinstance(item, Trajectory):
            pairs.append((item.prompt_id, item))
        else:
            pid, traj = item
            pairs.append((pid, traj))
    return pairs


def irl_value(policy: PolicyTable, demos) -> float:
    """Mean negative log-likelihood of the demos under the policy."""
    pairs = _demo_pairs(demos)
    if not pairs:
        raise ValueError("demos must be nonempty")
    total = 0.0
    for pid, traj in pairs:
        _, logp = trajectory_log_prob(policy, pid, traj.tokens)
        total += logp
    return -total / len(pairs)


def irl_loss(policy: PolicyTable, demos) -> tuple[float, SparseGradient]:
    """Forward-KL fit to the degenerate demo distribution.

    Reduces to the mean demo NLL; the gradient with respect to the logits is
    the negated mean score, so descending it raises demo likelihood.
    """
    pairs = _demo_pairs(demos)
    if not pairs:
        raise ValueError("demos must be nonempty")
    w = -1.0 / len(pairs)
    grad = SparseGradient()
    value = 0.0
    for pid, traj in pairs:
        per_tok, logp = trajectory_log_prob(policy, pid, traj.tokens)
        value -= logp / len(pairs)
        for t, tok in enumerate(traj.tokens):
            probs = np.exp(_log_probs(policy, pid, traj.tokens[:t]))
            block = -probs
            block[tok] += 1.0
            grad.accumulate((pid, traj.tokens[:t]), block, weight=w)
    return value, grad


def irl_descent_step(policy: PolicyTable, demos, lr: float,
                     max_halvings: int = 30) -> tuple[PolicyTable, float]:
    """One guarded descent step on irl_loss.

    The step is accepted only if the loss does not increase; otherwise the
    rate is halved and retried, and a policy already at a stationary point
    is returned untouched.
    """
    if lr == 0.0:
        return policy, irl_value(policy, demos)
    val0, grad = irl_loss(policy, demos)
    if not grad.blocks:
        return policy, val0
    step = lr
    for _ in range(max_halvings + 1):
        cand = apply_update(policy, grad, -step)
        val1 = irl_value(cand, demos)
        if val1 <= val0:
            return cand, val1
        step /= 2.0
    return policy, val0


def irl_step(policy: PolicyTable, demo_set, cfg: SpsConfig) -> PolicyTable:
    """Run the iteration's IRL stage on one demo set.

    Applies irl_steps_per_iteration guarded descent steps; with a configured
    irl_batch_size each step sees a circular slice of the demos, otherwise
    all of them.
    """
    pairs = _demo_pairs(demo_set)
    if not pairs or cfg.irl_lr == 0.0:
        return policy
    n = len(pairs)
    bs = cfg.irl_batch_size
    for s in range(cfg.irl_steps_per_iteration):
        if bs is None or bs >= n:
            batch = pairs
        else:
            start = (s * bs) % n
            batch = [pairs[(start + j) % n] for j in range(bs)]
        policy, _ = irl_descent_step(policy, batch, cfg.irl_lr)
    return policy


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    phase: str
    step: int
    objective: float | None
    irl_loss: float | None
    mean_reward: float | None
    entropy_root: float
    greedy_logp: float
    pass_at_k: float | None
    support_coverage: float | None
    seed: int

    def to_json(self) -> str:
        return json.dumps({
            "iter": self.iter,
            "phase": self.phase,
            "step": self.step,
            "objective": self.objective,
            "irl_loss": self.irl_loss,
            "mean_reward": self.mean_reward,
            "entropy_root": self.entropy_root,
            "greedy_logp": self.greedy_logp,
            "pass_at_k": self.pass_at_k,
            "support_coverage": self.support_coverage,
            "seed": self.seed,
        })


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)
    step_records: list[StepRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())

    def save_step_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(StepRecord.CSV_HEADER + "\n")
            for rec in self.step_records:
                fh.write(rec.csv_row() + "\n")


def _master_seed(rng) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2**32))


def _step_seed(master: int, iteration: int, step: int) -> int:
    return int(np.random.SeedSequence([master, iteration, step]).generate_state(1)[0])


def _groups_from_entries(entries, tasks, group_size: int) -> list[RolloutGroup]:
    by_prompt: dict[int, list[PoolEntry]] = {}
    for e in entries:
        by_prompt.setdefault(e.prompt_id, []).append(e)
    groups = []
    for task in tasks:
        es = by_prompt[task.prompt_id]
        groups.append(RolloutGroup(
            prompt_id=task.prompt_id,
            trajectories=tuple(e.trajectory for e in es),
            rewards=tuple(e.reward for e in es),
            old_logps=tuple(e.trajectory.per_token_logp for e in es),
        ))
    return groups


def _trace_eval(policy, tasks, cfg: SpsConfig, master: int, tag: int):
    if not cfg.trace_metrics:
        return None, None
    rng = derive_rng(master, 7001, tag)
    matrix = sample_matrix(policy, tasks, cfg.trace_eval_n, rng)
    k = min(cfg.trace_pass_k, cfg.trace_eval_n)
    pk = float(np.mean([
        pass_at_k_unbiased(cfg.trace_eval_n, int(row.sum()), k)
        for row in matrix.rewards
    ]))
    covs = []
    for task in tasks:
        rec = support_coverage(policy, task, cfg.trace_prob_floor)
        covs.append(rec.covered / rec.total if rec.total else 0.0)
    return pk, float(np.mean(covs))


def _loop(base_policy: PolicyTable, task_suite, cfg: SpsConfig, rng,
          irl_enabled: bool, out_dir=None) -> tuple[PolicyTable, TrainTrace]:
    master = _master_seed(rng)
    tasks = list(task_suite)
    holdout = []
    if cfg.convergence_epsilon is not None and cfg.holdout_count > 0:
        if cfg.holdout_count >= len(tasks):
            raise ValueError("holdout_count must leave at least one training task")
        holdout = tasks[len(tasks) - cfg.holdout_count:]
        tasks = tasks[:len(tasks) - cfg.holdout_count]
    policy = base_policy
    trace = TrainTrace()
    global_step = 0
    prev_avg = None
    for it in range(cfg.max_iterations):
        pool = RolloutPool()
        ref = policy
        cached_groups = None
        for s in range(cfg.rl_steps_per_iteration):
            seed = _step_seed(master, it, s)
            if cfg.reuse_rollouts and cached_groups is not None:
                policy, record, _ = rl_step(
                    policy, tasks, cfg, None, seed, ref_policy=ref,
                    step_index=global_step, groups=cached_groups)
            else:
                policy, record, delta = rl_step(
                    policy, tasks, cfg, None, seed, ref_policy=ref,
                    step_index=global_step)
                pool.extend(delta)
                if cfg.reuse_rollouts:
                    cached_groups = _groups_from_entries(delta, tasks, cfg.group_size)
            pk, cov = _trace_eval(policy, tasks, cfg, master, global_step)
            trace.records.append(TraceRecord(
                iter=it, phase="RL", step=global_step,
                objective=record.value, irl_loss=None,
                mean_reward=record.mean_reward,
                entropy_root=record.entropy_root,
                greedy_logp=record.greedy_logp,
                pass_at_k=pk, support_coverage=cov, seed=seed))
            trace.step_records.append(record)
            global_step += 1
        if irl_enabled and cfg.irl_steps_per_iteration > 0 and cfg.irl_lr > 0:
            demos_by_prompt = {
                t.prompt_id: l2te_select(pool, t.prompt_id, cfg) for t in tasks
            }
            for s in range(cfg.irl_steps_per_iteration):
                if cfg.irl_scope == "per_prompt":
                    losses = []
                    for t in tasks:
                        policy, val = irl_descent_step(
                            policy, demos_by_prompt[t.prompt_id], cfg.irl_lr)
                        losses.append(val)
                    mean_loss = float(np.mean(losses))
                else:
                    all_pairs = [
                        p for t in tasks
                        for p in _demo_pairs(demos_by_prompt[t.prompt_id])
                    ]
                    bs = cfg.irl_batch_size
                    if bs is None or bs >= len(all_pairs):
                        batch = all_pairs
                    else:
                        start = (s * bs) % len(all_pairs)
                        batch = [all_pairs[(start + j) % len(all_pairs)]
                                 for j in range(bs)]
                    policy, mean_loss = irl_descent_step(policy, batch, cfg.irl_lr)
                pk, cov = _trace_eval(policy, tasks, cfg, master, global_step)
                trace.records.append(TraceRecord(
                    iter=it, phase="IRL", step=global_step,
                    objective=None, irl_loss=mean_loss,
                    mean_reward=None,
                    entropy_root=_mean_root_entropy(policy, tasks),
                    greedy_logp=_mean_greedy_logp(policy, tasks),
                    pass_at_k=pk, support_coverage=cov, seed=master))
                global_step += 1
        pool.clear()
        if out_dir is not None and cfg.checkpoint_every > 0 and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(policy, f"{out_dir}/checkpoint_iter{it + 1:03d}.txt")
        if cfg.convergence_epsilon is not None and holdout:
            rng_eval = derive_rng(master, 7002, it)
            matrix = sample_matrix(policy, holdout, cfg.convergence_eval_n, rng_eval)
            avg = avg_at_k(matrix)
            if prev_avg is not None and abs(avg - prev_avg) < cfg.convergence_epsilon:
                break
            prev_avg = avg
    return policy, trace


def _mean_root_entropy(policy: PolicyTable, tasks) -> float:
    vals = [entropy(np.exp(_log_probs(policy, t.prompt_id, ()))) for t in tasks]
    return float(np.mean(vals))


def _mean_greedy_logp(policy: PolicyTable, tasks) -> float:
    vals = [greedy_decode(policy, t.prompt_id).total_logp for t in tasks]
    return float(np.mean(vals))


def sps_loop(base_policy: PolicyTable, task_suite, cfg: SpsConfig, rng,
             out_dir=None) -> tuple[PolicyTable, TrainTrace]:
    """Alternate RL phases with the IRL stage for cfg.max_iterations."""
    return _loop(base_policy, task_suite, cfg, rng, irl_enabled=True,
                 out_dir=out_dir)


def grpo_baseline_loop(base_policy: PolicyTable, task_suite, cfg: SpsConfig,
                       rng, out_dir=None) -> tuple[PolicyTable, TrainTrace]:
    """The same schedule with the IRL stage disabled, for fair comparison."""
    return _loop(base_policy, task_suite, cfg, rng, irl_enabled=False,
                 out_dir=out_dir)
