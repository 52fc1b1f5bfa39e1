"""Group Relative Policy Optimization with a toy categorical token policy.

For a group of K responses sampled for the same prompt, the advantage of
response i is its reward minus the group mean, broadcast to every token.
The objective of one group is

    J = 1/K sum_i 1/|o_i| sum_t min(rho_it A_i, clip(rho_it, 1-eps, 1+eps) A_i)
        - beta * KL

with rho_it = pi(o_it) / pi_old(o_it) and the k3 estimate of the KL to the
reference policy on the sampled tokens. The toy policy holds independent
per-slot categorical logits per context, so the gradient of J is analytic.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax

from .codec import (
    DEFAULT_VOLUME,
    NUM_BINS,
    InteractionVolume,
    decode_voxels,
    encode_voxels,
)
from .joints import check_joint_name
from .reward import JointErrors, RewardConfig, huber, pose_reward
from .utils import (
    KitError,
    atomic_writer,
    check_fields,
    check_types,
    derive_rng,
)

logger = logging.getLogger(__name__)

GRPO_FIELDS = (
    "group_size",
    "clip_epsilon",
    "kl_beta",
    "learning_rate",
    "steps",
    "seed",
    "inner_epochs",
    "log_every",
)
TASK_FIELDS = (
    "num_contexts",
    "joints",
    "alphabet_size",
    "seed",
    "volume",
    "reward",
)
CURVE_COLUMNS = ("step", "mean_reward", "clip_fraction", "kl")

RewardFn = Callable[[int, np.ndarray], float]


class GroupTooSmall(KitError):
    """Raised when a group has fewer than two responses"""


@dataclass(frozen=True)
class GrpoConfig:
    """GRPO hyperparameters.

    Attributes:
        group_size: Responses sampled per prompt (K).
        clip_epsilon: Ratio clip range; may be inf to disable clipping.
        kl_beta: Weight of the KL penalty to the reference policy.
        learning_rate: Gradient ascent step on the toy logits.
        steps: Number of optimization steps.
        seed: Master seed of every random stream.
        inner_epochs: Gradient steps per sampling pass; pi_old is the
            sampling policy for all of them.
        log_every: Log progress every this many steps (0 to disable).
    """

    group_size: int = 8
    clip_epsilon: float = 0.2
    kl_beta: float = 0.01
    learning_rate: float = 50.0
    steps: int = 200
    seed: int = 7
    inner_epochs: int = 1
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError(
                f"group_size must be >= 2, got {self.group_size}"
            )
        if not self.clip_epsilon > 0:
            raise ValueError(
                f"clip_epsilon must be positive, got {self.clip_epsilon}"
            )
        if not self.kl_beta >= 0:
            raise ValueError(f"kl_beta must be >= 0, got {self.kl_beta}")
        if not self.learning_rate >= 0:
            raise ValueError(
                f"learning_rate must be >= 0, got {self.learning_rate}"
            )
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.inner_epochs < 1:
            raise ValueError(
                f"inner_epochs must be >= 1, got {self.inner_epochs}"
            )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GrpoConfig":
        check_fields(data, GRPO_FIELDS, where="grpo config")
        check_types(
            data,
            {
                "group_size": "integer",
                "clip_epsilon": "number",
                "kl_beta": "number",
                "learning_rate": "number",
                "steps": "integer",
                "seed": "integer",
                "inner_epochs": "integer",
                "log_every": "integer",
            },
            "grpo config",
        )
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_GRPO = GrpoConfig()


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Reward minus group mean, summing to exactly zero.

    The mean uses a correctly rounded sum. The differences are then put on
    a dyadic grid 2**-48 relative to the reward scale and the integer
    residual is removed from the largest entry, so the advantages sum to
    zero exactly.

    Raises:
        GroupTooSmall: When fewer than two rewards are given.
    """
    rewards = np.asarray(rewards, dtype=float).reshape(-1)
    if rewards.size < 2:
        raise GroupTooSmall(
            f"Group-relative advantages need >= 2 responses, "
            f"got {rewards.size}"
        )

    mean = math.fsum(rewards) / rewards.size
    advantages = rewards - mean
    scale = float(np.max(np.abs(rewards)))
    if scale == 0 or not advantages.any():
        return np.zeros_like(rewards)

    _, exponent = math.frexp(scale)
    quantum = math.ldexp(1.0, exponent - 48)
    units = np.rint(advantages / quantum).astype(np.int64)
    residual = int(units.sum())
    if residual:
        units[int(np.argmax(np.abs(units)))] -= residual
    return units.astype(float) * quantum


@dataclass(frozen=True, eq=False)
class RolloutGroup:
    """K responses sampled for one prompt with their per-token log-probs.

    Attributes:
        context: The prompt/context index.
        responses: (K, T) token indices.
        logp_current: (K, T) log-probs under the policy being optimized.
        logp_old: (K, T) log-probs under the sampling policy.
        logp_ref: (K, T) log-probs under the reference policy.
        rewards: (K,) rewards.
    """

    context: int
    responses: np.ndarray
    logp_current: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    rewards: np.ndarray

    def __post_init__(self) -> None:
        responses = np.asarray(self.responses, dtype=np.int64)
        if responses.ndim != 2:
            raise ValueError("responses must be a (K, T) array")
        for name in ("logp_current", "logp_old", "logp_ref"):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.shape != responses.shape:
                raise ValueError(
                    f"{name} has shape {value.shape}, "
                    f"expecting {responses.shape}"
                )
            object.__setattr__(self, name, value)
        rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        if len(rewards) != len(responses):
            raise ValueError(
                f"{len(rewards)} rewards for {len(responses)} responses"
            )
        object.__setattr__(self, "responses", responses)
        object.__setattr__(self, "rewards", rewards)

    @property
    def group_size(self) -> int:
        return len(self.responses)

    def advantages(self) -> np.ndarray:
        return group_advantages(self.rewards)


def _surrogate_terms(
    ratio: np.ndarray,
    advantages: np.ndarray,
    epsilon: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token surrogate, its unclipped branch, and the clipped mask"""
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantages
    return np.minimum(unclipped, clipped), unclipped, clipped < unclipped


def clipped_surrogate(
    group: RolloutGroup,
    epsilon: float,
    advantages: Sequence[float] | None = None,
) -> float:
    """The clipped surrogate of one group, token-averaged per response then
    averaged over responses.

    Args:
        group: The rollout group.
        epsilon: The clip range.
        advantages: Sequence-level advantages; defaults to the
            group-relative advantages of the rewards.
    """
    if advantages is None:
        advantages = group.advantages()
    advantages = np.asarray(advantages, dtype=float).reshape(-1, 1)
    ratio = np.exp(group.logp_current - group.logp_old)
    terms, _, _ = _surrogate_terms(ratio, advantages, epsilon)
    return float(np.mean(terms.mean(axis=1)))


def _k3(logp_current: np.ndarray, logp_ref: np.ndarray) -> np.ndarray:
    delta = np.asarray(logp_ref, dtype=float) - np.asarray(
        logp_current, dtype=float
    )
    with np.errstate(over="ignore"):
        # >= 0 mathematically; the clamp only removes rounding
        return np.maximum(np.expm1(delta) - delta, 0.0)


def kl_penalty(logp_current: np.ndarray, logp_ref: np.ndarray) -> float:
    """k3 estimate of KL(pi || pi_ref) averaged over sampled tokens.

    exp(d) - d - 1 with d = logp_ref - logp_current, never negative and
    zero only where the two agree.
    """
    logp_current = np.asarray(logp_current, dtype=float)
    logp_ref = np.asarray(logp_ref, dtype=float)
    if logp_current.shape != logp_ref.shape:
        raise ValueError(
            f"Shape mismatch: {logp_current.shape} vs {logp_ref.shape}"
        )
    if logp_current.size == 0:
        return 0.0
    return float(np.mean(_k3(logp_current, logp_ref)))


@dataclass(eq=False)
class ToyPolicy:
    """Independent categorical distributions, one per (context, slot).

    Attributes:
        logits: (contexts, slots, alphabet) logits.
    """

    logits: np.ndarray

    def __post_init__(self) -> None:
        logits = np.array(self.logits, dtype=float)
        if logits.ndim != 3:
            raise ValueError(
                "logits must have shape (contexts, slots, alphabet)"
            )
        if not np.isfinite(logits).all():
            raise ValueError("logits must be finite")
        self.logits = logits

    @classmethod
    def uniform(
        cls,
        num_contexts: int,
        num_slots: int,
        alphabet_size: int,
    ) -> "ToyPolicy":
        return cls(np.zeros((num_contexts, num_slots, alphabet_size)))

    @property
    def num_contexts(self) -> int:
        return self.logits.shape[0]

    @property
    def num_slots(self) -> int:
        return self.logits.shape[1]

    @property
    def alphabet_size(self) -> int:
        return self.logits.shape[2]

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=-1)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def sample(self, context: int, rng: np.random.Generator) -> np.ndarray:
        """One response: a token per slot, by inverse CDF"""
        cdf = np.cumsum(self.probs()[context], axis=-1)
        draws = rng.random(self.num_slots)
        tokens = np.sum(cdf <= draws[:, None], axis=-1)
        return np.minimum(tokens, self.alphabet_size - 1)

    def token_log_probs(self, context: int, tokens: np.ndarray) -> np.ndarray:
        """(K, T) log-probs of the given (K, T) tokens"""
        return _gather(self.log_probs()[context], tokens)

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.logits.copy())


def _gather(log_probs: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    slots = np.arange(tokens.shape[-1])
    return log_probs[slots, tokens]


def grpo_objective(
    logits: np.ndarray,
    groups: Sequence[RolloutGroup],
    epsilon: float,
    beta: float,
) -> Tuple[float, np.ndarray, float]:
    """The GRPO objective as a function of the toy logits, with gradient.

    The current log-probs of every group are recomputed from `logits`;
    logp_old, logp_ref and the sampled tokens stay fixed.

    Returns:
        The objective averaged over groups, its gradient with respect to
        the logits, and the fraction of tokens whose clipped branch won.
    """
    log_probs = log_softmax(np.asarray(logits, dtype=float), axis=-1)
    probs = np.exp(log_probs)
    grad = np.zeros_like(log_probs)
    values = []
    clipped_tokens = 0
    total_tokens = 0

    for group in groups:
        context = group.context
        tokens = group.responses
        k, t = tokens.shape
        logp = _gather(log_probs[context], tokens)
        ratio = np.exp(logp - group.logp_old)
        advantages = group.advantages()[:, None]
        terms, unclipped, clipped_mask = _surrogate_terms(
            ratio, advantages, epsilon
        )
        kl = _k3(logp, group.logp_ref)
        values.append(terms.mean() - beta * kl.mean())
        clipped_tokens += int(clipped_mask.sum())
        total_tokens += tokens.size

        # d terms / d logp = rho * A where the unclipped branch is active
        coef = np.where(clipped_mask, 0.0, unclipped)
        if beta:
            delta = group.logp_ref - logp
            coef = coef + beta * np.expm1(delta)
        coef = coef / (k * t)

        # d logp(token) / d logits = onehot(token) - probs
        slots = np.broadcast_to(np.arange(t), tokens.shape)
        np.add.at(grad[context], (slots, tokens), coef)
        grad[context] -= coef.sum(axis=0)[:, None] * probs[context]

    n = len(groups)
    return (
        math.fsum(values) / n,
        grad / n,
        clipped_tokens / total_tokens if total_tokens else 0.0,
    )


@dataclass(frozen=True)
class StepStats:
    step: int
    mean_reward: float
    mean_abs_advantage: float
    clip_fraction: float
    kl: float
    objective: float

    def to_dict(self) -> dict:
        return asdict(self)


def sample_groups(
    policy: ToyPolicy,
    prompts: Sequence[int],
    reward_fn: RewardFn,
    cfg: GrpoConfig,
    ref_policy: ToyPolicy | None = None,
    step: int = 0,
) -> List[RolloutGroup]:
    """Sample K responses per prompt from the policy and score them.

    Response i of prompt b at a given step draws from its own stream
    derived from (seed, step, b, i), so the draws do not depend on the
    order in which responses are produced.
    """
    ref_policy = ref_policy or policy
    log_probs = policy.log_probs()
    ref_log_probs = ref_policy.log_probs()
    groups = []
    for b, context in enumerate(prompts):
        responses = np.stack(
            [
                policy.sample(context, derive_rng(cfg.seed, step, b, i))
                for i in range(cfg.group_size)
            ]
        )
        logp = _gather(log_probs[context], responses)
        groups.append(
            RolloutGroup(
                context=context,
                responses=responses,
                logp_current=logp,
                logp_old=logp.copy(),
                logp_ref=_gather(ref_log_probs[context], responses),
                rewards=[float(reward_fn(context, r)) for r in responses],
            )
        )
    return groups


def grpo_step(
    policy: ToyPolicy,
    prompts: Sequence[int],
    reward_fn: RewardFn,
    cfg: GrpoConfig = DEFAULT_GRPO,
    ref_policy: ToyPolicy | None = None,
    step: int = 0,
) -> Tuple[ToyPolicy, StepStats]:
    """One GRPO step: sample groups, then ascend the objective.

    Args:
        policy: The current policy; it is not modified.
        prompts: Context indices, one group per entry.
        reward_fn: Maps (context, response tokens) to a reward.
        cfg: The hyperparameters.
        ref_policy: The KL reference, defaults to the current policy.
        step: The step index, part of the random stream derivation.

    Returns:
        The updated policy and the step statistics.
    """
    groups = sample_groups(policy, prompts, reward_fn, cfg, ref_policy, step)

    logits = policy.logits.copy()
    objective = clip_fraction = 0.0
    for epoch in range(cfg.inner_epochs):
        value, grad, fraction = grpo_objective(
            logits, groups, cfg.clip_epsilon, cfg.kl_beta
        )
        if epoch == 0:
            objective = value
        clip_fraction = fraction
        if cfg.learning_rate:
            logits = logits + cfg.learning_rate * grad

    rewards = np.concatenate([group.rewards for group in groups])
    advantages = np.concatenate([group.advantages() for group in groups])
    stats = StepStats(
        step=step,
        mean_reward=math.fsum(rewards) / rewards.size,
        mean_abs_advantage=math.fsum(np.abs(advantages)) / advantages.size,
        clip_fraction=clip_fraction,
        kl=math.fsum(
            kl_penalty(g.logp_current, g.logp_ref) for g in groups
        ) / len(groups),
        objective=objective,
    )
    return ToyPolicy(logits), stats


@dataclass(frozen=True)
class ToyContext:
    """A prompt of the toy task: which joints, and where they truly are"""

    joints: Tuple[str, ...]
    targets: Tuple[Tuple[float, float, float], ...]


# Coarse 3D reward: random responses land around 1-2 m off target
TOY_REWARD = RewardConfig(delta=500.0, kappa=400.0, tau=1.0e6, lam=0.5)


@dataclass(frozen=True)
class SyntheticLocalizationTask:
    """Localize a few joints per context with coarsened voxel tokens.

    A response holds one coarse token per axis per joint. Coarse token c
    stands for the fine voxel index at the center of its bin, which the
    real 0-999 codec then decodes to millimeters; the reward is the pose
    reward of the decoded joints against the targets.
    """

    contexts: Tuple[ToyContext, ...]
    alphabet_size: int = 10
    volume: InteractionVolume = DEFAULT_VOLUME
    reward: RewardConfig = TOY_REWARD

    def __post_init__(self) -> None:
        if not self.contexts:
            raise ValueError("A task needs at least one context")
        lengths = {len(ctx.joints) for ctx in self.contexts}
        if len(lengths) != 1:
            raise ValueError("Every context must hold the same joint count")
        if not 2 <= self.alphabet_size <= NUM_BINS:
            raise ValueError(
                f"alphabet_size must be in [2, {NUM_BINS}], "
                f"got {self.alphabet_size}"
            )
        for ctx in self.contexts:
            for name in ctx.joints:
                check_joint_name(name)
            # targets must be encodable
            encode_voxels(np.array(ctx.targets), self.volume)

    @classmethod
    def generate(
        cls,
        num_contexts: int = 2,
        joints: Sequence[str] = ("left_wrist", "right_wrist"),
        alphabet_size: int = 10,
        seed: int = 7,
        volume: InteractionVolume = DEFAULT_VOLUME,
        reward: RewardConfig = TOY_REWARD,
    ) -> "SyntheticLocalizationTask":
        """Targets drawn uniformly from the inner 80% of the volume"""
        rng = derive_rng(seed, 0)
        contexts = []
        for _ in range(num_contexts):
            local = rng.uniform(0.1, 0.9, size=(len(joints), 3))
            targets = volume.origin + local * volume.extent
            contexts.append(
                ToyContext(
                    joints=tuple(joints),
                    targets=tuple(tuple(map(float, t)) for t in targets),
                )
            )
        return cls(tuple(contexts), alphabet_size, volume, reward)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SyntheticLocalizationTask":
        check_fields(data, TASK_FIELDS, where="task config")
        check_types(
            data,
            {
                "num_contexts": "integer",
                "joints": "list",
                "alphabet_size": "integer",
                "seed": "integer",
                "volume": "object",
                "reward": "object",
            },
            "task config",
        )
        kwargs = {
            key: data[key]
            for key in ("num_contexts", "alphabet_size", "seed")
            if key in data
        }
        if "joints" in data:
            kwargs["joints"] = tuple(data["joints"])
        if "volume" in data:
            kwargs["volume"] = InteractionVolume.from_dict(data["volume"])
        if "reward" in data:
            kwargs["reward"] = RewardConfig.from_dict(data["reward"])
        return cls.generate(**kwargs)

    @property
    def num_contexts(self) -> int:
        return len(self.contexts)

    @property
    def num_joints(self) -> int:
        return len(self.contexts[0].joints)

    @property
    def num_slots(self) -> int:
        return 3 * self.num_joints

    def fine_tokens(self, tokens: np.ndarray) -> np.ndarray:
        """Coarse tokens to the 0-999 index at the center of each bin"""
        tokens = np.asarray(tokens, dtype=np.int64)
        return (2 * tokens + 1) * NUM_BINS // (2 * self.alphabet_size)

    def coarse_tokens(self, fine: np.ndarray) -> np.ndarray:
        return np.asarray(fine, dtype=np.int64) * self.alphabet_size // NUM_BINS

    def decode(self, tokens: np.ndarray) -> np.ndarray:
        """(J, 3) millimeter joints of one response"""
        fine = self.fine_tokens(tokens).reshape(self.num_joints, 3)
        return decode_voxels(fine, self.volume)

    def best_tokens(self, context: int) -> np.ndarray:
        """The coarse tokens of the bins holding the targets"""
        fine, _ = encode_voxels(
            np.array(self.contexts[context].targets), self.volume
        )
        return self.coarse_tokens(fine).reshape(-1)

    def reward_fn(self, context: int, tokens: np.ndarray) -> float:
        targets = np.array(self.contexts[context].targets)
        distances = np.linalg.norm(self.decode(tokens) - targets, axis=1)
        errs = JointErrors(distances, np.ones(len(distances), dtype=bool))
        return pose_reward(errs, self.reward)

    def uniform_baseline(self, max_outcomes: int = 20_000_000) -> float:
        """Expected reward of the uniform policy, by exhaustive enumeration.

        Every joint takes one of alphabet**3 positions; all joint
        combinations are enumerated, which is alphabet**(3 * joints)
        outcomes per context.
        """
        a = self.alphabet_size
        outcomes = a ** self.num_slots
        if outcomes > max_outcomes:
            raise ValueError(
                f"Exhaustive baseline needs {outcomes} outcomes per context, "
                f"more than {max_outcomes}"
            )

        grid = np.stack(
            np.meshgrid(np.arange(a), np.arange(a), np.arange(a), indexing="ij"),
            axis=-1,
        ).reshape(-1, 3)
        points = decode_voxels(self.fine_tokens(grid), self.volume)
        cfg = self.reward
        huber_vec = np.vectorize(lambda d: huber(d, cfg.delta))

        expected = []
        for ctx in self.contexts:
            energy = np.zeros(1)
            success = np.zeros(1)
            for target in ctx.targets:
                d = np.linalg.norm(points - np.array(target), axis=1)
                energy = (energy[:, None] + huber_vec(d)[None, :]).ravel()
                success = (
                    success[:, None] + (d < cfg.kappa)[None, :]
                ).ravel()
            n = len(ctx.targets)
            rewards = (
                cfg.lam * np.exp(-energy / n / cfg.tau)
                + (1.0 - cfg.lam) * success / n
            )
            expected.append(float(rewards.mean()))
        return math.fsum(expected) / len(expected)


@dataclass(frozen=True)
class LearningCurve:
    """Per-step statistics of a training run and the final policy"""

    stats: Tuple[StepStats, ...]
    policy: ToyPolicy | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.stats)

    @property
    def mean_rewards(self) -> np.ndarray:
        return np.array([s.mean_reward for s in self.stats])

    def quartile_means(self) -> Tuple[float, float]:
        """Mean reward of the first and of the last quarter of the steps"""
        rewards = self.mean_rewards
        quarter = max(1, len(rewards) // 4)
        return (
            math.fsum(rewards[:quarter]) / quarter,
            math.fsum(rewards[-quarter:]) / quarter,
        )

    def write_csv(self, path: str | Path) -> None:
        with atomic_writer(path) as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CURVE_COLUMNS)
            for s in self.stats:
                writer.writerow(
                    [s.step, repr(s.mean_reward), repr(s.clip_fraction),
                     repr(s.kl)]
                )


def train_toy(
    task: SyntheticLocalizationTask,
    cfg: GrpoConfig = DEFAULT_GRPO,
) -> LearningCurve:
    """Train a uniform toy policy on the task with GRPO.

    Every step uses all contexts as prompts. The reference policy is the
    initial one.
    """
    policy = ToyPolicy.uniform(
        task.num_contexts, task.num_slots, task.alphabet_size
    )
    reference = policy.copy()
    prompts = list(range(task.num_contexts))

    stats = []
    for step in range(cfg.steps):
        policy, step_stats = grpo_step(
            policy,
            prompts,
            task.reward_fn,
            cfg,
            ref_policy=reference,
            step=step,
        )
        stats.append(step_stats)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.info(
                "step %d/%d | reward %.4f | clip %.3f | kl %.5f",
                step + 1,
                cfg.steps,
                step_stats.mean_reward,
                step_stats.clip_fraction,
                step_stats.kl,
            )

    return LearningCurve(tuple(stats), policy)
