"""Reward-guided refinement of the SFT decoder with a KL leash.

The trainer ascends J = w1 * E[reward] - w2 * E[log pi(y|x) - log ref(y|x)]
with a score-function gradient estimator and a mean-signal baseline. The
per-sample log-ratio is an unbiased KL estimator and is exactly zero when the
policy equals the frozen reference. A config flag flips the ascent into the
descent direction for studying the sign-ambiguous combined-loss form.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .decoder import CaptionDecoder
from .errors import DivergenceError, ValidationError
from .optim import MomentumSGD


@dataclass(frozen=True)
class RlWeights:
    w1: float = 0.4
    w2: float = 0.6

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValidationError("RL weights must be non-negative")
        if self.w1 == 0 and self.w2 == 0:
            raise ValidationError("RL weights must not both be zero")


@dataclass
class PolicyPair:
    """Trainable policy plus its frozen SFT reference."""

    policy: CaptionDecoder
    reference: CaptionDecoder

    def __post_init__(self):
        if self.policy.vocab.tokens != self.reference.vocab.tokens:
            raise ValidationError("policy and reference must share a vocabulary")

    @classmethod
    def from_sft(cls, sft_decoder: CaptionDecoder) -> "PolicyPair":
        return cls(policy=sft_decoder.clone(), reference=sft_decoder.clone())


@dataclass
class RlSample:
    cond: np.ndarray
    prompt_ids: list[int]
    cap_ids: list[int]
    ended_with_eos: bool


def _checksum(decoder: CaptionDecoder) -> str:
    h = hashlib.sha256()
    for k in sorted(decoder.params):
        h.update(np.ascontiguousarray(decoder.params[k]).tobytes())
    return h.hexdigest()


def kl_to_sft(
    cap_ids: list[int],
    ended_with_eos: bool,
    cond,
    prompt_ids: list[int],
    pair: PolicyPair,
    log_prob_floor: float | None = 1e-8,
) -> float:
    """Per-sample KL estimator: sum over emitted tokens of
    log pi(y|x) - log ref(y|x); exactly 0 when the models coincide."""
    lp_policy = pair.policy.caption_log_probs(cond, prompt_ids, cap_ids, ended_with_eos)
    lp_ref = pair.reference.caption_log_probs(cond, prompt_ids, cap_ids, ended_with_eos)
    if log_prob_floor is None:
        if not np.isfinite(lp_ref).all():
            raise ValidationError("reference assigns zero probability to a sampled token")
    else:
        floor = np.log(log_prob_floor)
        lp_policy = np.maximum(lp_policy, floor)
        lp_ref = np.maximum(lp_ref, floor)
    return float((lp_policy - lp_ref).sum())


def _scorer(reward_model) -> Callable:
    return reward_model.score if hasattr(reward_model, "score") else reward_model


@dataclass
class RlObjectiveResult:
    objective: float
    mean_reward: float
    mean_kl: float
    grads: dict[str, np.ndarray]


def rl_objective(
    batch: Sequence[RlSample],
    reward_model,
    pair: PolicyPair,
    weights: RlWeights,
    baseline: float | None = None,
    log_prob_floor: float | None = 1e-8,
) -> RlObjectiveResult:
    """Objective value and a score-function gradient estimate for ascent.

    baseline defaults to the batch mean of the per-sample signal
    w1 * reward - w2 * log-ratio; pass an explicit constant to keep the
    estimator exactly unbiased in enumeration oracles.
    """
    if not batch:
        raise ValidationError("empty RL batch")
    score = _scorer(reward_model)
    rewards = np.empty(len(batch))
    kls = np.empty(len(batch))
    for i, sample in enumerate(batch):
        rewards[i] = score(sample.cond, sample.prompt_ids, sample.cap_ids)
        kls[i] = kl_to_sft(
            sample.cap_ids, sample.ended_with_eos, sample.cond, sample.prompt_ids, pair, log_prob_floor
        )
    if not np.isfinite(rewards).all():
        raise ValidationError("reward model produced a non-finite score")
    signal = weights.w1 * rewards - weights.w2 * kls
    b = float(signal.mean()) if baseline is None else baseline
    grads = pair.policy.zero_grads()
    for i, sample in enumerate(batch):
        advantage = float(signal[i] - b)
        if advantage != 0.0:
            pair.policy.log_prob_backward(
                sample.cond,
                sample.prompt_ids,
                sample.cap_ids,
                sample.ended_with_eos,
                grads,
                coef=advantage / len(batch),
            )
    return RlObjectiveResult(
        objective=float(signal.mean()),
        mean_reward=float(rewards.mean()),
        mean_kl=float(kls.mean()),
        grads=grads,
    )


@dataclass(frozen=True)
class RlTrainConfig:
    steps: int = 200
    lr: float = 0.02
    momentum: float = 0.0
    samples_per_step: int = 8
    temperature: float = 1.0
    seed: int = 0
    kl_ceiling: float = 50.0
    clip_norm: float = 5.0
    paper_literal_sign: bool = False  # descend instead of ascend, for study


def rl_train(
    examples: Sequence[tuple[np.ndarray, list[int]]],
    pair: PolicyPair,
    reward_model,
    weights: RlWeights = RlWeights(),
    config: RlTrainConfig = RlTrainConfig(),
) -> tuple[CaptionDecoder, list[dict]]:
    """Sample-and-ascend loop over (cond, prompt_ids) conditioning examples.

    Deterministic given the seed; the reference model is checksum-verified
    untouched. Raises DivergenceError when mean KL exceeds the ceiling.
    """
    if not examples:
        raise ValidationError("no conditioning examples")
    ref_before = _checksum(pair.reference)
    rng = np.random.default_rng(config.seed)
    opt = MomentumSGD(pair.policy.params, lr=config.lr, momentum=config.momentum, clip_norm=config.clip_norm)
    direction = -1.0 if config.paper_literal_sign else 1.0
    log: list[dict] = []
    for step in range(config.steps):
        batch: list[RlSample] = []
        for _ in range(config.samples_per_step):
            cond, prompt_ids = examples[int(rng.integers(len(examples)))]
            cap_ids, ended = pair.policy.generate(
                cond, prompt_ids, mode="sample", temperature=config.temperature, rng=rng
            )
            batch.append(RlSample(cond=cond, prompt_ids=prompt_ids, cap_ids=cap_ids, ended_with_eos=ended))
        result = rl_objective(batch, reward_model, pair, weights)
        opt.step(result.grads, direction=direction)
        log.append(
            {
                "step": step,
                "J": result.objective,
                "mean_reward": result.mean_reward,
                "mean_kl": result.mean_kl,
            }
        )
        if result.mean_kl > config.kl_ceiling:
            raise DivergenceError(
                f"mean KL {result.mean_kl:.3f} exceeded ceiling {config.kl_ceiling} at step {step}"
            )
    if _checksum(pair.reference) != ref_before:
        raise ValidationError("reference model changed during RL training")
    return pair.policy, log
