"""Group-relative policy-gradient objectives: GRPO, DAPO, and GSPO.

All three share the same skeleton: sample G rollouts per prompt, normalize the
binary rewards within each group into advantages, and maximize a clipped
importance-weighted surrogate. They differ in where the ratio lives (token
level for GRPO/DAPO, a per-sequence geometric mean for GSPO), how tokens are
averaged (per-sequence mean for GRPO/GSPO, one global token mean for DAPO),
the clip widths, and whether a KL leash to a reference snapshot is applied
(GRPO only). Values and analytical gradients are exact so they can be checked
against brute-force summation and finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyTrajectory,
    NoTrainableGroups,
    OneSidedGroup,
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
    sample_trajectory,
)
from .tasks import TaskInstance, validate

GRPO = "grpo"
DAPO = "dapo"
GSPO = "gspo"
OBJECTIVE_KINDS = (GRPO, DAPO, GSPO)


@dataclass(frozen=True)
class ClipConfig:
    """Clip widths, KL coefficient, and which objective they belong to."""

    objective_kind: str
    eps_low: float
    eps_high: float
    beta: float = 0.0

    def __post_init__(self):
        if self.objective_kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind {self.objective_kind!r}")
        if not (0 < self.eps_low <= self.eps_high):
            raise ValueError("need 0 < eps_low <= eps_high")
        if self.objective_kind == GRPO and self.eps_low != self.eps_high:
            raise ValueError("grpo uses a symmetric clip range")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.objective_kind != GRPO and self.beta != 0.0:
            raise ValueError("only grpo carries a KL term")

    @staticmethod
    def grpo(eps: float = 0.2, beta: float = 0.01) -> "ClipConfig":
        return ClipConfig(GRPO, eps, eps, beta)

    @staticmethod
    def dapo(eps_low: float = 0.2, eps_high: float = 0.28) -> "ClipConfig":
        return ClipConfig(DAPO, eps_low, eps_high, 0.0)

    @staticmethod
    def gspo(eps_low: float = 3e-4, eps_high: float = 4e-4) -> "ClipConfig":
        return ClipConfig(GSPO, eps_low, eps_high, 0.0)


@dataclass(frozen=True)
class RolloutGroup:
    """G trajectories for one prompt with rewards and behavior log-probs."""

    prompt_id: int
    trajectories: tuple[Trajectory, ...]
    rewards: tuple[int, ...]
    old_logps: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        g = len(self.trajectories)
        if len(self.rewards) != g or len(self.old_logps) != g:
            raise ValueError("trajectories, rewards, and old_logps must align")
        if any(r not in (0, 1) for r in self.rewards):
            raise ValueError("rewards must be binary")
        for traj, old in zip(self.trajectories, self.old_logps):
            if len(traj.tokens) != len(old):
                raise ValueError("old_logps length must match trajectory length")

    @property
    def size(self) -> int:
        return len(self.trajectories)


@dataclass(frozen=True)
class AdvantageVector:
    values: np.ndarray
    degenerate: bool


def group_advantages(rewards) -> AdvantageVector:
    """Group-normalized advantages (R - mean)/std with population std.

    All-equal rewards have zero variance; those groups get all-zero
    advantages and the degenerate flag.
    """
    r = np.asarray(rewards, dtype=float)
    if r.shape[0] < 2:
        raise ValueError("a group needs at least 2 rollouts")
    mean = r.mean()
    std = r.std()  # population convention (divide by G)
    if std == 0.0:
        return AdvantageVector(np.zeros_like(r), degenerate=True)
    return AdvantageVector((r - mean) / std, degenerate=False)


def _current_logps(policy: PolicyTable, traj: Trajectory) -> np.ndarray:
    out = np.empty(len(traj.tokens))
    for t, tok in enumerate(traj.tokens):
        out[t] = _log_probs(policy, traj.prompt_id, traj.tokens[:t])[tok]
    return out


def token_ratio(policy: PolicyTable, old_logps, trajectory: Trajectory, t: int) -> float:
    """Importance ratio pi_theta(y_t|prefix) / pi_old(y_t|prefix)."""
    new_lp = _log_probs(policy, trajectory.prompt_id, trajectory.tokens[:t])[trajectory.tokens[t]]
    return float(np.exp(new_lp - old_logps[t]))


def sequence_ratio_gspo(policy: PolicyTable, old_logps, trajectory: Trajectory) -> float:
    """Geometric mean of the token ratios over one trajectory."""
    if len(trajectory.tokens) == 0:
        raise EmptyTrajectory("sequence ratio undefined for an empty trajectory")
    new_lp = _current_logps(policy, trajectory)
    old = np.asarray(old_logps, dtype=float)
    return float(np.exp((new_lp - old).mean()))


@dataclass
class ObjectiveReport:
    value: float
    gradient: SparseGradient
    clipped_token_fraction: float
    kl_to_ref: float
    objective_kind: str


def _score_block(policy: PolicyTable, prompt_id: int, prefix: tuple[int, ...],
                 tok: int) -> np.ndarray:
    probs = np.exp(_log_probs(policy, prompt_id, prefix))
    block = -probs
    block[tok] += 1.0
    return block


def _as_groups(groups) -> list[RolloutGroup]:
    if isinstance(groups, RolloutGroup):
        return [groups]
    return list(groups)


def grpo_objective(groups, policy: PolicyTable, ref_policy: PolicyTable | None,
                   cfg: ClipConfig) -> ObjectiveReport:
    """Clipped token-ratio surrogate with per-sequence averaging and a KL leash.

    value = mean over groups of (1/G) sum_i (1/|y_i|) sum_t
            min(r * A, clip(r, 1-eps, 1+eps) * A), minus beta times the
    per-token KL(pi || pi_ref) estimate r_ref - log r_ref - 1 with
    r_ref = pi_ref/pi, aggregated the same way. Degenerate (all-equal-reward)
    groups contribute zero and are skipped entirely. Tokens in the clipped
    branch contribute zero gradient.
    """
    assert cfg.objective_kind == GRPO
    batch = _as_groups(groups)
    if not batch:
        raise ValueError("empty batch")
    n_groups = len(batch)
    grad = SparseGradient()
    pg_value = 0.0
    kl_value = 0.0
    clipped = 0
    considered = 0
    for group in batch:
        adv = group_advantages(group.rewards)
        if adv.degenerate:
            continue
        g = group.size
        for i, traj in enumerate(group.trajectories):
            a = adv.values[i]
            length = len(traj.tokens)
            if length == 0:
                continue
            w = 1.0 / (n_groups * g * length)
            new_lp = _current_logps(policy, traj)
            old = np.asarray(group.old_logps[i])
            ratios = np.exp(new_lp - old)
            if cfg.beta > 0.0 and ref_policy is not None:
                ref_lp = _current_logps(ref_policy, traj)
            for t, tok in enumerate(traj.tokens):
                considered += 1
                r = ratios[t]
                clipped_r = min(max(r, 1.0 - cfg.eps_low), 1.0 + cfg.eps_high)
                unclipped_term = r * a
                clipped_term = clipped_r * a
                if clipped_term < unclipped_term:
                    pg_value += w * clipped_term
                    clipped += 1
                else:
                    pg_value += w * unclipped_term
                    grad.accumulate((traj.prompt_id, traj.tokens[:t]),
                                    _score_block(policy, traj.prompt_id,
                                                 traj.tokens[:t], tok),
                                    weight=w * a * r)
                if cfg.beta > 0.0 and ref_policy is not None:
                    log_rr = ref_lp[t] - new_lp[t]
                    rr = math.exp(log_rr)
                    kl_value += w * (rr - log_rr - 1.0)
                    grad.accumulate((traj.prompt_id, traj.tokens[:t]),
                                    _score_block(policy, traj.prompt_id,
                                                 traj.tokens[:t], tok),
                                    weight=-cfg.beta * w * (1.0 - rr))
    value = pg_value - cfg.beta * kl_value
    frac = clipped / considered if considered else 0.0
    return ObjectiveReport(value=float(value), gradient=grad,
                           clipped_token_fraction=frac,
                           kl_to_ref=float(kl_value), objective_kind=GRPO)


def dapo_filter(groups) -> tuple[list[RolloutGroup], int]:
    """Drop groups whose rewards are all-0 or all-1 (no learning signal)."""
    batch = _as_groups(groups)
    kept = [g for g in batch if 0 < sum(g.rewards) < g.size]
    return kept, len(batch) - len(kept)


def dapo_objective(groups, policy: PolicyTable, cfg: ClipConfig) -> ObjectiveReport:
    """Token-level surrogate with one global token mean and asymmetric clip.

    Every token across the batch carries weight 1/(total tokens), so long
    trajectories weigh proportionally more than under GRPO's per-sequence
    mean. Degenerate groups have been removed by dapo_filter; an empty
    remainder raises NoTrainableGroups. No KL term.
    """
    assert cfg.objective_kind == DAPO
    batch, _ = dapo_filter(groups)
    if not batch:
        raise NoTrainableGroups("every group was all-0 or all-1 reward")
    total_tokens = sum(len(t.tokens) for g in batch for t in g.trajectories)
    if total_tokens == 0:
        raise NoTrainableGroups("no tokens to train on")
    w = 1.0 / total_tokens
    grad = SparseGradient()
    value = 0.0
    clipped = 0
    for group in batch:
        adv = group_advantages(group.rewards)
        for i, traj in enumerate(group.trajectories):
            a = adv.values[i]
            if not traj.tokens:
                continue
            new_lp = _current_logps(policy, traj)
            old = np.asarray(group.old_logps[i])
            ratios = np.exp(new_lp - old)
            for t, tok in enumerate(traj.tokens):
                r = ratios[t]
                clipped_r = min(max(r, 1.0 - cfg.eps_low), 1.0 + cfg.eps_high)
                unclipped_term = r * a
                clipped_term = clipped_r * a
                if clipped_term < unclipped_term:
                    value += w * clipped_term
                    clipped += 1
                else:
                    value += w * unclipped_term
                    grad.accumulate((traj.prompt_id, traj.tokens[:t]),
                                    _score_block(policy, traj.prompt_id,
                                                 traj.tokens[:t], tok),
                                    weight=w * a * r)
    frac = clipped / total_tokens
    return ObjectiveReport(value=float(value), gradient=grad,
                           clipped_token_fraction=frac,
                           kl_to_ref=0.0, objective_kind=DAPO)


def gspo_objective(groups, policy: PolicyTable, cfg: ClipConfig) -> ObjectiveReport:
    """Sequence-ratio surrogate: clip gates whole responses, not tokens.

    value = mean over groups of (1/G) sum_i min(s_i * A_i, clip(s_i) * A_i)
    with s_i the geometric-mean token ratio. A clipped sequence contributes
    zero gradient for all of its tokens; otherwise each token receives the
    A_i * s_i / |y_i| share of the score.
    """
    assert cfg.objective_kind == GSPO
    batch = _as_groups(groups)
    if not batch:
        raise ValueError("empty batch")
    n_groups = len(batch)
    grad = SparseGradient()
    value = 0.0
    clipped_tokens = 0
    considered_tokens = 0
    for group in batch:
        adv = group_advantages(group.rewards)
        if adv.degenerate:
            continue
        g = group.size
        for i, traj in enumerate(group.trajectories):
            a = adv.values[i]
            length = len(traj.tokens)
            if length == 0:
                continue
            considered_tokens += length
            s = sequence_ratio_gspo(policy, group.old_logps[i], traj)
            clipped_s = min(max(s, 1.0 - cfg.eps_low), 1.0 + cfg.eps_high)
            unclipped_term = s * a
            clipped_term = clipped_s * a
            w = 1.0 / (n_groups * g)
            if clipped_term < unclipped_term:
                value += w * clipped_term
                clipped_tokens += length
            else:
                value += w * unclipped_term
                token_weight = w * a * s / length
                for t, tok in enumerate(traj.tokens):
                    grad.accumulate((traj.prompt_id, traj.tokens[:t]),
                                    _score_block(policy, traj.prompt_id,
                                                 traj.tokens[:t], tok),
                                    weight=token_weight)
    frac = clipped_tokens / considered_tokens if considered_tokens else 0.0
    return ObjectiveReport(value=float(value), gradient=grad,
                           clipped_token_fraction=frac,
                           kl_to_ref=0.0, objective_kind=GSPO)


@dataclass(frozen=True)
class ContrastiveRecord:
    """Eq.-style contrastive split of the group signal (diagnostic only)."""

    var_term: float
    pos_expectation: float
    neg_expectation: float

    @property
    def value(self) -> float:
        return self.var_term * (self.pos_expectation - self.neg_expectation)


def contrastive_decomposition(group: RolloutGroup, policy: PolicyTable) -> ContrastiveRecord:
    """Bernoulli-variance times the gap in length-normalized likelihoods.

    Expectations are empirical means over the group's positive and negative
    rollouts of pi_theta(y|x)/|y| under the current policy.
    """
    rewards = np.asarray(group.rewards)
    if rewards.min() == rewards.max():
        raise OneSidedGroup("need at least one positive and one negative rollout")
    p_hat = float(rewards.mean())
    var_term = math.sqrt(p_hat * (1.0 - p_hat))
    pos, neg = [], []
    for reward, traj in zip(group.rewards, group.trajectories):
        lik = math.exp(_current_logps(policy, traj).sum()) / max(len(traj.tokens), 1)
        (pos if reward == 1 else neg).append(lik)
    return ContrastiveRecord(var_term=var_term,
                             pos_expectation=float(np.mean(pos)),
                             neg_expectation=float(np.mean(neg)))


@dataclass(frozen=True)
class SamplerParams:
    temperature: float = 1.0


@dataclass(frozen=True)
class PoolEntry:
    """One rollout as the IRL stage will see it."""

    prompt_id: int
    trajectory: Trajectory
    reward: int
    behavior_total_logp: float
    rl_step_index: int


@dataclass(frozen=True)
class StepRecord:
    step: int
    objective_kind: str
    value: float
    clipped_frac: float
    kl: float
    mean_reward: float
    entropy_root: float
    greedy_logp: float

    CSV_HEADER = "step,objective_kind,value,clipped_frac,kl,mean_reward,entropy_root,greedy_logp"

    def csv_row(self) -> str:
        return ",".join([
            str(self.step), self.objective_kind, repr(float(self.value)),
            repr(float(self.clipped_frac)), repr(float(self.kl)),
            repr(float(self.mean_reward)), repr(float(self.entropy_root)),
            repr(float(self.greedy_logp)),
        ])


def sample_group(policy: PolicyTable, task: TaskInstance, group_size: int,
                 temperature: float, rng: np.random.Generator) -> RolloutGroup:
    """Sample G rollouts for one task and score them with the validator."""
    trajectories = []
    rewards = []
    for _ in range(group_size):
        traj = sample_trajectory(policy, task.prompt_id, temperature, rng)
        trajectories.append(traj)
        rewards.append(validate(task, traj.tokens).reward)
    return RolloutGroup(
        prompt_id=task.prompt_id,
        trajectories=tuple(trajectories),
        rewards=tuple(rewards),
        old_logps=tuple(t.per_token_logp for t in trajectories),
    )


def rl_step(policy: PolicyTable, task_batch, cfg, sampler_params: SamplerParams | None,
            rng, ref_policy: PolicyTable | None = None, step_index: int = 0,
            groups=None):
    """One RL update: sample, score, normalize, step the policy.

    `cfg` is an SpsConfig (group size, clip config, learning rate). `rng` is
    either an integer seed path base (per-prompt streams are derived from it)
    or a Generator consumed sequentially. Pre-sampled `groups` may be passed
    to reuse a rollout batch across several gradient steps; old_logps inside
    them then refer to the policy that sampled them. Returns the new policy,
    a StepRecord, and the pool entries for every sampled rollout.
    """
    sampler = sampler_params or SamplerParams()
    tasks = list(task_batch)
    if groups is None:
        groups = []
        for task in tasks:
            if isinstance(rng, (int, np.integer)):
                prompt_rng = derive_rng(int(rng), 0, task.prompt_id)
            else:
                prompt_rng = rng
            group = sample_group(policy, task, cfg.group_size,
                                 sampler.temperature, prompt_rng)
            if (cfg.clip.objective_kind == DAPO and cfg.dapo_max_resamples > 0
                    and not 0 < sum(group.rewards) < group.size):
                for retry in range(1, cfg.dapo_max_resamples + 1):
                    if isinstance(rng, (int, np.integer)):
                        prompt_rng = derive_rng(int(rng), retry, task.prompt_id)
                    group = sample_group(policy, task, cfg.group_size,
                                         sampler.temperature, prompt_rng)
                    if 0 < sum(group.rewards) < group.size:
                        break
            groups.append(group)

    kind = cfg.clip.objective_kind
    if kind == GRPO:
        report = grpo_objective(groups, policy, ref_policy or policy, cfg.clip)
    elif kind == DAPO:
        report = dapo_objective(groups, policy, cfg.clip)
    else:
        report = gspo_objective(groups, policy, cfg.clip)

    # Parameter blocks are disjoint per prompt, so the batch-mean gradient
    # shrinks every block by 1/batch. per_prompt scope undoes that factor and
    # makes rl_lr a per-prompt rate independent of suite size.
    step = cfg.rl_lr
    if getattr(cfg, "rl_scope", "per_prompt") == "per_prompt":
        step *= len(groups)
    new_policy = apply_update_from(policy, report.gradient, step)

    pool_delta = [
        PoolEntry(prompt_id=g.prompt_id, trajectory=traj, reward=reward,
                  behavior_total_logp=traj.total_logp, rl_step_index=step_index)
        for g in groups for traj, reward in zip(g.trajectories, g.rewards)
    ]
    all_rewards = [r for g in groups for r in g.rewards]
    root_entropies = [entropy(np.exp(_log_probs(new_policy, t.prompt_id, ())))
                      for t in tasks]
    greedy_logps = [greedy_decode(new_policy, t.prompt_id).total_logp for t in tasks]
    record = StepRecord(
        step=step_index,
        objective_kind=kind,
        value=report.value,
        clipped_frac=report.clipped_token_fraction,
        kl=report.kl_to_ref,
        mean_reward=float(np.mean(all_rewards)) if all_rewards else 0.0,
        entropy_root=float(np.mean(root_entropies)),
        greedy_logp=float(np.mean(greedy_logps)),
    )
    return new_policy, record, pool_delta


def apply_update_from(policy: PolicyTable, gradient: SparseGradient,
                      lr: float) -> PolicyTable:
    if lr == 0.0 or not gradient.blocks:
        return policy
    return apply_update(policy, gradient, lr)
