"""Training mathematics: group-normalized advantages, the token-level clipped
surrogate objective (no KL term anywhere), and the alpha-weighted cold-start
loss, all exercised on a tabular autoregressive softmax policy.

The objective averages over the total token count of the group rather than
per sequence, so long completions contribute proportionally more tokens; a
regression test pins the difference against a sequence-mean variant. Old-
policy log-probabilities are constants under differentiation: the on-policy
gradient per token is advantage * grad(logprob_new).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import Dataset, GroundTruth, PipelineConfig, QuestionKind, QuestionTask
from .rewards import RewardBreakdown, score_output

ZERO_VARIANCE_EPS = 1e-12
DEFAULT_MAX_RATIO = 1e6

StateKey = tuple


class RLError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"non-finite parameters at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass(frozen=True)
class Segment:
    kind: str  # "trace" | "answer"
    start: int
    end: int  # exclusive


@dataclass(frozen=True)
class Completion:
    """One generated sequence with per-token log-probabilities under the
    current and the frozen old policy."""

    token_ids: tuple[int, ...]
    logprobs_new: tuple[float, ...]
    logprobs_old: tuple[float, ...]
    reward: float = 0.0
    segments: tuple[Segment, ...] = ()

    def __post_init__(self) -> None:
        n = len(self.token_ids)
        if len(self.logprobs_new) != n or len(self.logprobs_old) != n:
            raise RLError(
                f"length mismatch: {n} tokens vs {len(self.logprobs_new)}/{len(self.logprobs_old)} logprobs"
            )
        if self.segments:
            covered = sorted((s.start, s.end) for s in self.segments)
            cursor = 0
            for start, end in covered:
                if start != cursor or end < start:
                    raise RLError(f"segments do not partition the sequence: {covered}")
                cursor = end
            if cursor != n:
                raise RLError(f"segments cover {cursor} of {n} tokens")

    def segment_tokens(self, kind: str) -> list[int]:
        out: list[int] = []
        for seg in self.segments:
            if seg.kind == kind:
                out.extend(range(seg.start, seg.end))
        return out


@dataclass(frozen=True)
class AdvantageGroup:
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    degenerate: bool


def compute_advantages(rewards: Sequence[float]) -> AdvantageGroup:
    """Group-normalize rewards: (R - mean) / population std. A group whose
    rewards all coincide is degenerate and gets all-zero advantages."""
    if len(rewards) < 2:
        raise RLError(f"advantage group needs at least 2 rewards, got {len(rewards)}")
    arr = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise RLError(f"rewards must be finite, got {list(arr)}")
    mean = float(arr.mean())
    std = float(arr.std())  # population (divide-by-N) std
    if std < ZERO_VARIANCE_EPS:
        return AdvantageGroup(tuple(float(r) for r in arr), (0.0,) * len(rewards), degenerate=True)
    adv = (arr - mean) / std
    return AdvantageGroup(tuple(float(r) for r in arr), tuple(float(a) for a in adv), degenerate=False)


def token_ratio(logprob_new: float, logprob_old: float, max_ratio: float = DEFAULT_MAX_RATIO) -> float:
    """Importance ratio exp(new - old); overflow clamps at ``max_ratio``."""
    if not (np.isfinite(logprob_new) and np.isfinite(logprob_old)):
        raise RLError(f"non-finite logprobs: new={logprob_new}, old={logprob_old}")
    diff = logprob_new - logprob_old
    if diff > np.log(max_ratio):
        warnings.warn(f"token ratio overflow (diff={diff:.3g}); clamped at {max_ratio:g}", RuntimeWarning)
        return max_ratio
    return float(np.exp(diff))


@dataclass(frozen=True)
class TokenDiagnostics:
    ratios: tuple[tuple[float, ...], ...]
    clipped: tuple[tuple[bool, ...], ...]
    clamped_ratios: int
    total_tokens: int


def grpo_objective(
    completions: Sequence[Completion],
    advantages: AdvantageGroup,
    clip_epsilon: float,
    max_ratio: float = DEFAULT_MAX_RATIO,
) -> tuple[float, TokenDiagnostics]:
    """Clipped surrogate averaged over the group's total token count.

    objective = (1 / sum_i |o_i|) * sum_i sum_t min(r_it * A_i,
                clip(r_it, 1 - eps, 1 + eps) * A_i)
    """
    if not completions:
        raise RLError("empty completion group")
    if len(completions) != len(advantages.advantages):
        raise RLError(
            f"{len(completions)} completions vs {len(advantages.advantages)} advantages"
        )
    total_tokens = sum(len(c.token_ids) for c in completions)
    if total_tokens == 0:
        raise RLError("completion group has no tokens")
    lo, hi = 1.0 - clip_epsilon, 1.0 + clip_epsilon
    acc = 0.0
    clamped = 0
    ratios: list[tuple[float, ...]] = []
    clipped: list[tuple[bool, ...]] = []
    for completion, adv in zip(completions, advantages.advantages):
        row_r: list[float] = []
        row_c: list[bool] = []
        for lp_new, lp_old in zip(completion.logprobs_new, completion.logprobs_old):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                r = token_ratio(lp_new, lp_old, max_ratio)
            if r == max_ratio:
                clamped += 1
            acc += min(r * adv, min(max(r, lo), hi) * adv)
            row_r.append(r)
            row_c.append(not lo <= r <= hi)
        ratios.append(tuple(row_r))
        clipped.append(tuple(row_c))
    diags = TokenDiagnostics(
        ratios=tuple(ratios),
        clipped=tuple(clipped),
        clamped_ratios=clamped,
        total_tokens=total_tokens,
    )
    return acc / total_tokens, diags


def sft_loss(completion: Completion, alpha: float) -> float:
    """alpha-weighted sum of the mean answer NLL and the mean trace NLL."""
    if not 0.0 <= alpha <= 1.0:
        raise RLError(f"alpha must be in [0, 1], got {alpha}")
    answer_idx = completion.segment_tokens("answer")
    trace_idx = completion.segment_tokens("trace")
    if not answer_idx or not trace_idx:
        raise RLError(
            f"both segments must be non-empty (answer={len(answer_idx)}, trace={len(trace_idx)})"
        )
    lp = np.asarray(completion.logprobs_new)
    answer_nll = float(-lp[answer_idx].mean())
    trace_nll = float(-lp[trace_idx].mean())
    return alpha * answer_nll + (1.0 - alpha) * trace_nll


class ToyPolicy:
    """Tabular autoregressive softmax policy.

    Parameters live in a table mapping a context key (prompt, position, and
    the last ``window`` generated tokens) to a row of vocabulary logits.
    Rows materialize to zeros (uniform) on first touch.
    """

    def __init__(self, vocab: Sequence[str], max_len: int, window: int = 1):
        if len(vocab) != len(set(vocab)):
            raise RLError("vocabulary entries must be unique")
        self.vocab = tuple(vocab)
        self.max_len = max_len
        self.window = window
        self.table: dict[StateKey, np.ndarray] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def state_key(self, prompt: str, position: int, prefix: Sequence[int]) -> StateKey:
        recent = tuple(prefix[-self.window:]) if self.window > 0 else ()
        return (prompt, position, recent)

    def logits(self, key: StateKey) -> np.ndarray:
        row = self.table.get(key)
        if row is None:
            row = np.zeros(self.vocab_size)
            self.table[key] = row
        return row

    def log_probs(self, key: StateKey, temperature: float = 1.0) -> np.ndarray:
        scaled = self.logits(key) / temperature
        scaled = scaled - scaled.max()
        return scaled - np.log(np.exp(scaled).sum())

    def probs(self, key: StateKey, temperature: float = 1.0) -> np.ndarray:
        return np.exp(self.log_probs(key, temperature))

    def sample(
        self, prompt: str, length: int, rng: np.random.Generator, temperature: float = 1.0
    ) -> tuple[tuple[int, ...], tuple[float, ...]]:
        """Draw one completion, returning token ids and their log-probs."""
        length = min(length, self.max_len)
        tokens: list[int] = []
        logprobs: list[float] = []
        for position in range(length):
            key = self.state_key(prompt, position, tokens)
            lp = self.log_probs(key, temperature)
            token = int(rng.choice(self.vocab_size, p=np.exp(lp)))
            tokens.append(token)
            logprobs.append(float(lp[token]))
        return tuple(tokens), tuple(logprobs)

    def sequence_log_probs(
        self, prompt: str, token_ids: Sequence[int], temperature: float = 1.0
    ) -> np.ndarray:
        """Per-token log-probs of a fixed sequence under current parameters."""
        out = np.empty(len(token_ids))
        for position, token in enumerate(token_ids):
            key = self.state_key(prompt, position, token_ids[:position])
            out[position] = self.log_probs(key, temperature)[token]
        return out

    def render(self, token_ids: Sequence[int]) -> str:
        return "".join(self.vocab[t] for t in token_ids)

    def clone(self) -> "ToyPolicy":
        twin = ToyPolicy(self.vocab, self.max_len, self.window)
        twin.table = {k: v.copy() for k, v in self.table.items()}
        return twin


@dataclass(frozen=True)
class PolicySnapshot:
    """Current policy plus the frozen old-policy copy the ratio divides by."""

    current: ToyPolicy
    frozen_old: ToyPolicy


@dataclass(frozen=True)
class GroupSample:
    prompt: str
    token_ids: tuple[int, ...]
    logprobs_old: tuple[float, ...]


def _clip_active_coefficient(ratio: float, advantage: float, lo: float, hi: float) -> float:
    """d/d(logprob_new) of min(r*A, clip(r)*A); zero when the clip branch is
    strictly active, r*A otherwise."""
    if ratio * advantage <= min(max(ratio, lo), hi) * advantage:
        return ratio * advantage
    return 0.0


def grpo_gradient(
    policy: ToyPolicy,
    samples: Sequence[GroupSample],
    advantages: AdvantageGroup,
    clip_epsilon: float,
    temperature: float = 1.0,
) -> dict[StateKey, np.ndarray]:
    """Analytic gradient of the token-level objective w.r.t. the logit table,
    treating old-policy logprobs as constants."""
    total_tokens = sum(len(s.token_ids) for s in samples)
    if total_tokens == 0:
        raise RLError("no tokens to differentiate")
    lo, hi = 1.0 - clip_epsilon, 1.0 + clip_epsilon
    grads: dict[StateKey, np.ndarray] = {}
    for sample, adv in zip(samples, advantages.advantages):
        lp_new = policy.sequence_log_probs(sample.prompt, sample.token_ids, temperature)
        for position, token in enumerate(sample.token_ids):
            ratio = float(np.exp(lp_new[position] - sample.logprobs_old[position]))
            coef = _clip_active_coefficient(ratio, adv, lo, hi) / total_tokens
            if coef == 0.0:
                continue
            key = policy.state_key(sample.prompt, position, sample.token_ids[:position])
            probs = policy.probs(key, temperature)
            row = grads.setdefault(key, np.zeros(policy.vocab_size))
            row -= coef * probs / temperature
            row[token] += coef / temperature
    return grads


def sft_gradient(
    policy: ToyPolicy,
    prompt: str,
    completion: Completion,
    alpha: float,
    temperature: float = 1.0,
) -> dict[StateKey, np.ndarray]:
    """Analytic gradient of the cold-start loss w.r.t. the logit table."""
    answer_idx = set(completion.segment_tokens("answer"))
    trace_idx = set(completion.segment_tokens("trace"))
    if not answer_idx or not trace_idx:
        raise RLError("both segments must be non-empty")
    grads: dict[StateKey, np.ndarray] = {}
    for position, token in enumerate(completion.token_ids):
        if position in answer_idx:
            weight = alpha / len(answer_idx)
        elif position in trace_idx:
            weight = (1.0 - alpha) / len(trace_idx)
        else:
            continue
        key = policy.state_key(prompt, position, completion.token_ids[:position])
        probs = policy.probs(key, temperature)
        row = grads.setdefault(key, np.zeros(policy.vocab_size))
        # d(-logprob)/d(logits) = (softmax - onehot) / T
        row += weight * probs / temperature
        row[token] -= weight / temperature
    return grads


class DifferentiableObjective(Protocol):
    def value(self, policy: ToyPolicy) -> float: ...
    def gradient(self, policy: ToyPolicy) -> dict[StateKey, np.ndarray]: ...


@dataclass
class GrpoObjectiveClosure:
    """The clipped objective as a function of policy parameters, for a fixed
    sampled group with frozen old-policy logprobs."""

    samples: tuple[GroupSample, ...]
    advantages: AdvantageGroup
    clip_epsilon: float
    temperature: float = 1.0

    def value(self, policy: ToyPolicy) -> float:
        completions = []
        for sample in self.samples:
            lp_new = policy.sequence_log_probs(sample.prompt, sample.token_ids, self.temperature)
            completions.append(
                Completion(
                    token_ids=sample.token_ids,
                    logprobs_new=tuple(float(x) for x in lp_new),
                    logprobs_old=sample.logprobs_old,
                )
            )
        objective, _ = grpo_objective(completions, self.advantages, self.clip_epsilon)
        return objective

    def gradient(self, policy: ToyPolicy) -> dict[StateKey, np.ndarray]:
        return grpo_gradient(policy, self.samples, self.advantages, self.clip_epsilon, self.temperature)


@dataclass
class SftLossClosure:
    prompt: str
    completion: Completion
    alpha: float
    temperature: float = 1.0

    def value(self, policy: ToyPolicy) -> float:
        lp_new = policy.sequence_log_probs(self.prompt, self.completion.token_ids, self.temperature)
        shadow = Completion(
            token_ids=self.completion.token_ids,
            logprobs_new=tuple(float(x) for x in lp_new),
            logprobs_old=self.completion.logprobs_old,
            segments=self.completion.segments,
        )
        return sft_loss(shadow, self.alpha)

    def gradient(self, policy: ToyPolicy) -> dict[StateKey, np.ndarray]:
        return sft_gradient(policy, self.prompt, self.completion, self.alpha, self.temperature)


def finite_diff_check(
    policy: ToyPolicy,
    objective: DifferentiableObjective,
    step: float = 1e-5,
) -> float:
    """Max relative error between the analytic gradient and central finite
    differences, parameter-wise over every touched logit entry."""
    if step <= 0:
        raise RLError(f"step must be positive, got {step}")
    analytic = objective.gradient(policy)
    base = objective.value(policy)
    if not np.isfinite(base):
        raise RLError(f"objective is non-finite at the evaluation point: {base}")
    worst = 0.0
    for key in sorted(analytic, key=repr):
        row = policy.logits(key)
        for j in range(policy.vocab_size):
            original = row[j]
            row[j] = original + step
            up = objective.value(policy)
            row[j] = original - step
            down = objective.value(policy)
            row[j] = original
            numeric = (up - down) / (2.0 * step)
            ga = float(analytic[key][j])
            err = abs(ga - numeric) / max(abs(ga), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


class RewardEnv(Protocol):
    """Synthetic task: prompts, a fixed episode length, rendering, scoring."""

    vocab: tuple[str, ...]
    prompts: tuple[str, ...]
    episode_length: int

    def render(self, token_ids: Sequence[int]) -> str: ...
    def score(self, prompt: str, text: str, gamma: float, delta: float) -> RewardBreakdown: ...


TAG_TOKENS = ("<think>", "</think>", "<answer>", "</answer>")


class CopyTokenEnv:
    """Copy task: the completion must place the prompt symbol inside the
    answer template. Scored by the real reward engine, so the policy faces
    the same extraction chain and format gate as a full-size generator."""

    def __init__(self, symbols: Sequence[str] = ("cat", "dog", "owl", "fox"), episode_length: int = 5):
        self.vocab = TAG_TOKENS + tuple(symbols)
        self.prompts = tuple(symbols)
        self.episode_length = episode_length
        self._task = QuestionTask(dataset=Dataset.INFOSEEK, kind=QuestionKind.ENTITY)

    def render(self, token_ids: Sequence[int]) -> str:
        return "".join(self.vocab[t] for t in token_ids)

    def score(self, prompt: str, text: str, gamma: float, delta: float) -> RewardBreakdown:
        truth = GroundTruth(alternatives=(prompt,))
        return score_output(text, truth, self._task, gamma, delta)


@dataclass(frozen=True)
class TrainingRow:
    iteration: int
    mean_task_reward: float
    mean_format_reward: float
    objective: float


@dataclass(frozen=True)
class TrainingResult:
    rows: tuple[TrainingRow, ...]
    best_iteration: int
    best_mean_task_reward: float
    best_table: Mapping[StateKey, np.ndarray]

    def reward_curve(self) -> list[tuple[int, float]]:
        return [(r.iteration, r.mean_task_reward) for r in self.rows]


def train_toy(
    policy: ToyPolicy,
    env: RewardEnv,
    cfg: PipelineConfig,
    iterations: int = 300,
    learning_rate: float = 20.0,
    seed: int = 0,
) -> TrainingResult:
    """Plain gradient-ascent GRPO loop on a synthetic task.

    Each iteration snapshots the old policy, samples a group of completions
    for one prompt, scores them with the rule-based rewards, normalizes the
    advantages, and takes one ascent step; the old policy re-synchronizes
    after every update, so ratios are 1 at sampling time. Prompts rotate
    round-robin for even coverage. Checkpoint selection tracks the best
    mean task reward.
    """
    if cfg.group_size < 2:
        raise RLError(f"group_size must be >= 2, got {cfg.group_size}")
    rng = np.random.default_rng(seed)
    rows: list[TrainingRow] = []
    best_iteration, best_mean_task = -1, -1.0
    best_table: dict[StateKey, np.ndarray] = {}
    for iteration in range(iterations):
        prompt = env.prompts[iteration % len(env.prompts)]
        snapshot = PolicySnapshot(current=policy, frozen_old=policy.clone())
        samples: list[GroupSample] = []
        breakdowns: list[RewardBreakdown] = []
        for _ in range(cfg.group_size):
            tokens, logprobs = snapshot.frozen_old.sample(
                prompt, env.episode_length, rng, cfg.temperature
            )
            samples.append(GroupSample(prompt=prompt, token_ids=tokens, logprobs_old=logprobs))
            breakdowns.append(env.score(prompt, env.render(tokens), cfg.gamma, cfg.delta))
        totals = [b.total for b in breakdowns]
        if not all(np.isfinite(t) for t in totals):
            raise TrainingDiverged(iteration, f"non-finite rewards from environment: {totals}")
        group = compute_advantages(totals)
        closure = GrpoObjectiveClosure(
            samples=tuple(samples),
            advantages=group,
            clip_epsilon=cfg.clip_epsilon,
            temperature=cfg.temperature,
        )
        objective = closure.value(policy)
        if not group.degenerate:
            for key, grad in closure.gradient(policy).items():
                row = policy.logits(key)
                row += learning_rate * grad
                if not np.all(np.isfinite(row)):
                    raise TrainingDiverged(iteration, f"state {key!r} has non-finite logits")
        mean_task = float(np.mean([b.task for b in breakdowns]))
        mean_format = float(np.mean([b.format for b in breakdowns]))
        rows.append(TrainingRow(iteration, mean_task, mean_format, objective))
        if mean_task > best_mean_task:
            best_iteration, best_mean_task = iteration, mean_task
            best_table = {k: v.copy() for k, v in policy.table.items()}
    return TrainingResult(
        rows=tuple(rows),
        best_iteration=best_iteration,
        best_mean_task_reward=best_mean_task,
        best_table=best_table,
    )
