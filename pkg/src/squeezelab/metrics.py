"""Evaluation metrics: Pass@k, Avg@k, accuracy histograms, similarity,
support coverage, and greedy-log-prob drift.

The tabular setting permits exact versions of quantities that are only
estimable at scale: support coverage enumerates every correct trajectory
and reads its probability straight off the policy, and the unbiased Pass@k
estimator is computed with exact integer binomials so it matches brute-force
subset enumeration bit for bit.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSamples, KExceedsN
from .policy import PolicyTable, Trajectory, greedy_decode, sample_trajectory, trajectory_log_prob
from .tasks import TaskInstance, enumerate_correct, validate

BUCKET_CENTERS = tuple(i / 10 for i in range(11))


@dataclass(frozen=True)
class SampleMatrix:
    """n sampled trajectories per prompt with their binary rewards."""

    prompt_ids: tuple[int, ...]
    rewards: np.ndarray
    trajectories: tuple[tuple[Trajectory, ...], ...] | None = None

    def __post_init__(self):
        r = np.asarray(self.rewards)
        if r.ndim != 2 or r.shape[0] != len(self.prompt_ids):
            raise ValueError("rewards must be a (prompts, n) matrix")
        if r.size and not np.isin(r, (0, 1)).all():
            raise ValueError("rewards must be binary")

    @property
    def n(self) -> int:
        return int(self.rewards.shape[1])

    @property
    def prompt_count(self) -> int:
        return int(self.rewards.shape[0])


def sample_matrix(policy: PolicyTable, tasks, n: int,
                  rng: np.random.Generator) -> SampleMatrix:
    """Draw n fresh temperature-1 samples per task and score them."""
    ids = []
    rewards = []
    trajs = []
    for task in tasks:
        row_t = tuple(sample_trajectory(policy, task.prompt_id, 1.0, rng)
                      for _ in range(n))
        ids.append(task.prompt_id)
        trajs.append(row_t)
        rewards.append([validate(task, t.tokens).reward for t in row_t])
    return SampleMatrix(prompt_ids=tuple(ids),
                        rewards=np.asarray(rewards, dtype=int),
                        trajectories=tuple(trajs))


@dataclass(frozen=True)
class PassAtKEstimate:
    k: int
    value: float
    method: str
    stderr: float | None = None


def pass_at_k_unbiased(n: int, c: int, k: int) -> float:
    """Exact expectation of max reward over uniform k-subsets of n samples.

    Computed as (C(n,k) - C(n-c,k)) / C(n,k) with exact integer binomials
    and one final division, which reproduces brute-force subset enumeration
    bit for bit (a running-product form does not).
    """
    if not 0 <= c <= n:
        raise ValueError("need 0 <= c <= n")
    if k < 1:
        raise ValueError("need k >= 1")
    if k > n:
        raise KExceedsN(f"k={k} exceeds sample count n={n}")
    total = math.comb(n, k)
    return (total - math.comb(n - c, k)) / total


def pass_at_k_mc(policy: PolicyTable, task: TaskInstance, k: int, trials: int,
                 rng: np.random.Generator) -> PassAtKEstimate:
    """Monte Carlo Pass@k: mean over trials of max reward among k samples."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    hits = 0
    for _ in range(trials):
        best = 0
        for _ in range(k):
            traj = sample_trajectory(policy, task.prompt_id, 1.0, rng)
            best = max(best, validate(task, traj.tokens).reward)
            if best == 1:
                break
        hits += best
    p_hat = hits / trials
    stderr = math.sqrt(p_hat * (1.0 - p_hat) / trials)
    return PassAtKEstimate(k=k, value=p_hat, method="monte_carlo", stderr=stderr)


def avg_at_k(matrix: SampleMatrix) -> float:
    """Mean single-sample accuracy: per-prompt mean reward, averaged.

    With a constant n across prompts this equals the pooled mean over all
    samples, and equals Pass@1 averaged over prompts.
    """
    return float(matrix.rewards.mean(axis=1).mean())


@dataclass(frozen=True)
class AccuracyHistogram:
    bucket_edges: tuple[float, ...]
    counts: tuple[int, ...]

    def to_csv(self) -> str:
        lines = ["bucket,count"]
        lines += [f"{edge},{count}" for edge, count in zip(self.bucket_edges, self.counts)]
        return "\n".join(lines) + "\n"


def accuracy_histogram(matrix: SampleMatrix) -> AccuracyHistogram:
    """Per-prompt pass rates snapped to the nearest of 11 bucket centers.

    Centers are 0.0, 0.1, ..., 1.0 with ties going up; the assignment
    (20*c + n) // (2*n) is exact integer arithmetic, so boundary rates like
    exactly 0.05 land deterministically in the 0.1 bucket.
    """
    counts = [0] * 11
    n = matrix.n
    for row in matrix.rewards:
        c = int(row.sum())
        counts[(20 * c + n) // (2 * n)] += 1
    return AccuracyHistogram(bucket_edges=BUCKET_CENTERS, counts=tuple(counts))


def _bigrams(tokens: tuple[int, ...]) -> frozenset:
    return frozenset(zip(tokens, tokens[1:]))


def similarity(trajectories) -> float:
    """100 times the mean pairwise Jaccard similarity of token-bigram sets.

    Two empty bigram sets count as identical (Jaccard 1). Lower values mean
    more diverse samples.
    """
    items = list(trajectories)
    if len(items) < 2:
        raise InsufficientSamples("similarity needs at least 2 trajectories")
    sets = []
    for t in items:
        tokens = t.tokens if isinstance(t, Trajectory) else tuple(t)
        sets.append(_bigrams(tokens))
    total = 0.0
    pairs = 0
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            a, b = sets[i], sets[j]
            union = len(a | b)
            total += 1.0 if union == 0 else len(a & b) / union
            pairs += 1
    return 100.0 * total / pairs


@dataclass(frozen=True)
class CoverageRecord:
    covered: int
    total: int
    mass_on_correct: float


def support_coverage(policy: PolicyTable, task: TaskInstance,
                     prob_floor: float) -> CoverageRecord:
    """Count and weigh the correct trajectories the policy still reaches.

    covered counts enumerated correct trajectories whose exact policy
    probability is at least prob_floor; mass_on_correct sums those
    probabilities over the whole correct set regardless of the floor.
    """
    correct = enumerate_correct(task)
    covered = 0
    mass = 0.0
    for tokens in correct:
        _, logp = trajectory_log_prob(policy, task.prompt_id, tokens)
        p = math.exp(logp)
        mass += p
        if p >= prob_floor:
            covered += 1
    return CoverageRecord(covered=covered, total=len(correct), mass_on_correct=mass)


@dataclass(frozen=True)
class GreedyDriftRow:
    prompt_id: int
    greedy_logp_current: float
    greedy_logp_base: float
    drift: float


@dataclass(frozen=True)
class GreedyDriftReport:
    rows: tuple[GreedyDriftRow, ...]
    mean_current: float
    mean_base: float
    mean_drift: float


def greedy_logprob_report(policy: PolicyTable, base_policy: PolicyTable,
                          tasks) -> GreedyDriftReport:
    """Per-task greedy log-prob under each policy's own greedy trajectory.

    Positive drift (current minus base) signals sharpening: the policy
    concentrates more mass on its modal sequence than the base did.
    """
    rows = []
    for task in tasks:
        cur = greedy_decode(policy, task.prompt_id).total_logp
        base = greedy_decode(base_policy, task.prompt_id).total_logp
        rows.append(GreedyDriftRow(prompt_id=task.prompt_id,
                                   greedy_logp_current=cur,
                                   greedy_logp_base=base,
                                   drift=cur - base))
    return GreedyDriftReport(
        rows=tuple(rows),
        mean_current=float(np.mean([r.greedy_logp_current for r in rows])),
        mean_base=float(np.mean([r.greedy_logp_base for r in rows])),
        mean_drift=float(np.mean([r.drift for r in rows])),
    )


def evaluation_report(policy: PolicyTable, base_policy: PolicyTable, tasks,
                      suite_name: str, n: int, ks, prob_floor: float,
                      rng: np.random.Generator) -> dict:
    """Assemble the full evaluation dictionary for one policy snapshot.

    Pass@k values use the unbiased estimator on n samples per prompt,
    averaged over prompts; ks above n are clamped to n with a warning.
    Similarity is the mean over prompts of the pairwise bigram similarity
    among that prompt's samples. Support numbers are summed over tasks and
    the mass field is the per-task mean.
    """
    matrix = sample_matrix(policy, tasks, n, rng)
    used_ks = []
    for k in ks:
        if k > n:
            warnings.warn(f"clamping k={k} to n={n}", stacklevel=2)
            k = n
        if k not in used_ks:
            used_ks.append(k)
    pass_rates = {}
    for k in used_ks:
        vals = [pass_at_k_unbiased(n, int(row.sum()), k) for row in matrix.rewards]
        pass_rates[str(k)] = float(np.mean(vals))
    sims = [similarity(row) for row in matrix.trajectories]
    covered = 0
    total = 0
    masses = []
    for task in tasks:
        rec = support_coverage(policy, task, prob_floor)
        covered += rec.covered
        total += rec.total
        masses.append(rec.mass_on_correct)
    drift = greedy_logprob_report(policy, base_policy, tasks)
    hist = accuracy_histogram(matrix)
    return {
        "suite": suite_name,
        "n": n,
        "k": used_ks,
        "pass_at_k": pass_rates,
        "avg_at_k": avg_at_k(matrix),
        "histogram": {"edges": list(hist.bucket_edges), "counts": list(hist.counts)},
        "similarity_bigram_jaccard": float(np.mean(sims)),
        "greedy_drift_mean": drift.mean_drift,
        "support": {"covered": covered, "total": total,
                    "mass": float(np.mean(masses))},
    }


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"
