"""Group-relative policy optimization with optional KL shaping.

Each question yields a group of sampled responses whose rewards are
standardized within the group to form advantages. The update ascends a
clipped importance-ratio surrogate, with a per-token KL term whose sign is
the whole difference between the two regularized modes:

    grpo   penalizes KL(policy ‖ frozen reference)   (stay close)
    bias   no KL term at all                          (plain surrogate)
    cdpo   rewards  KL(policy ‖ frozen bias model)    (push away)

All gradients are exact and hand-derived; the tests check them against
central finite differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError
from .policy import (
    PolicyParams,
    Response,
    backprop_token_grads,
    question_context,
    sample_response,
    token_distributions,
)
from .qgen import Question
from .rewards import RewardWeights, total_reward

logger = logging.getLogger(__name__)

MODES = ("grpo", "bias", "cdpo")
_DEFAULT_BETA = {"grpo": 0.05, "bias": 0.0, "cdpo": 0.01}
#: log-ratio clamp: exp(±30) bounds the importance ratio away from inf/0
_LOG_RATIO_BOUND = 30.0

_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class TrainerConfig:
    mode: str = "grpo"
    group_size: int = 8
    clip_eps: float = 0.2
    beta: float | None = None  # None resolves to the per-mode default
    kl_estimator: str = "exact"  # "exact" or "k3"
    learning_rate: float = 1e-3
    steps: int = 500
    optimizer: str = "adam"
    kl_cap: float | None = None
    max_tokens: int | None = None  # None defers to the policy architecture

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.group_size < 2:
            raise ConfigurationError("group size must be at least 2")
        if self.clip_eps <= 0:
            raise ConfigurationError("clip_eps must be positive")
        if self.kl_estimator not in ("exact", "k3"):
            raise ConfigurationError(f"unknown kl estimator {self.kl_estimator!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0 or self.steps < 0:
            raise ConfigurationError("learning rate must be positive, steps non-negative")
        if self.kl_cap is not None and self.kl_cap <= 0:
            raise ConfigurationError("kl_cap must be positive when set")
        if self.mode == "bias" and self.beta not in (None, 0.0):
            raise ConfigurationError("bias mode trains without a KL term")

    @property
    def resolved_beta(self) -> float:
        return _DEFAULT_BETA[self.mode] if self.beta is None else self.beta

    @property
    def kl_sign(self) -> float:
        # grpo pulls towards the other model, cdpo pushes away
        return 1.0 if self.mode == "cdpo" else -1.0


@dataclass
class GroupRollout:
    """Sampled group for one question: tokens, behaviour log-probs, rewards."""

    tokens: list[tuple[int, ...]]
    old_logprobs: list[np.ndarray]
    rewards: np.ndarray

    def __post_init__(self) -> None:
        if not (len(self.tokens) == len(self.old_logprobs) == len(self.rewards)):
            raise ValueError("group fields must be parallel")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ObjectiveReport:
    objective: float
    surrogate: float
    kl_mean: float


def compute_advantages(rewards: np.ndarray) -> np.ndarray:
    """Within-group standardization with population std; a group whose
    rewards are all identical carries no signal and maps to zeros."""
    rewards = np.asarray(rewards, dtype=np.float64)
    std = rewards.std()
    if std == 0.0:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


def token_ratios(new_logprobs: np.ndarray, old_logprobs: np.ndarray) -> np.ndarray:
    """exp(new - old) per token, with the log-ratio clamped to ±30."""
    delta = new_logprobs - old_logprobs
    if np.any(np.abs(delta) > _LOG_RATIO_BOUND):
        logger.warning(
            "clamping %d extreme token log-ratios", int((np.abs(delta) > _LOG_RATIO_BOUND).sum())
        )
        delta = np.clip(delta, -_LOG_RATIO_BOUND, _LOG_RATIO_BOUND)
    return np.exp(delta)


def kl_exact(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p ‖ q) over full distributions, shapes (T, V) -> (T,)."""
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


def kl_k3(p_tok: np.ndarray, q_tok: np.ndarray) -> np.ndarray:
    """Low-variance single-sample estimator r - log r - 1 with r = q/p,
    evaluated at the sampled tokens."""
    r = q_tok / p_tok
    return r - np.log(r) - 1.0


def rollout_group(
    params: PolicyParams,
    enc: np.ndarray,
    question: Question,
    group_size: int,
    rng: np.random.Generator,
    max_tokens: int | None = None,
    weights: RewardWeights = RewardWeights(),
) -> GroupRollout:
    ctx = question_context(params, enc)
    tokens: list[tuple[int, ...]] = []
    lps: list[np.ndarray] = []
    rewards = np.empty(group_size)
    for i in range(group_size):
        resp: Response = sample_response(params, enc, rng, max_tokens=max_tokens, ctx=ctx)
        tokens.append(resp.tokens)
        lps.append(resp.logprobs)
        rewards[i] = total_reward(resp.tokens, question, weights).total
    return GroupRollout(tokens=tokens, old_logprobs=lps, rewards=rewards)


def objective_and_gradient(
    params: PolicyParams,
    other: PolicyParams | None,
    enc: np.ndarray,
    rollout: GroupRollout,
    cfg: TrainerConfig,
) -> tuple[ObjectiveReport, np.ndarray]:
    """Group objective (to be ascended) and its exact parameter gradient.

    Per response the surrogate and KL terms are averaged over tokens, then
    averaged across the group. `other` is the frozen reference (grpo) or
    the frozen bias model (cdpo); it is required iff beta is non-zero.
    """
    beta = cfg.resolved_beta
    if beta != 0.0 and other is None:
        raise ValueError(f"{cfg.mode} with beta={beta} needs a comparison model")

    g = len(rollout)
    adv = compute_advantages(rollout.rewards)
    grad = np.zeros_like(params.flat)
    surrogate_sum = 0.0
    kl_sum = 0.0
    ctx = question_context(params, enc)
    other_ctx = question_context(other, enc) if other is not None else None

    for i in range(g):
        toks = rollout.tokens[i]
        t_len = len(toks)
        idx = np.arange(t_len)
        tok_arr = np.array(toks)

        p = token_distributions(params, enc, toks, ctx=ctx)  # (T, V)
        new_lp = np.log(p[idx, tok_arr])
        ratios = token_ratios(new_lp, rollout.old_logprobs[i])

        unclipped = ratios * adv[i]
        clipped = np.clip(ratios, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv[i]
        surrogate_sum += np.minimum(unclipped, clipped).mean()

        # subgradient convention: at the clip boundary take the unclipped
        # branch, so gradient vanishes only where the clipped branch is
        # strictly smaller
        active = ~(
            ((adv[i] > 0) & (ratios > 1.0 + cfg.clip_eps))
            | ((adv[i] < 0) & (ratios < 1.0 - cfg.clip_eps))
        )
        coeff = np.where(active, unclipped, 0.0)  # d surr / d logprob
        dlogits = coeff[:, None] * (-p)
        dlogits[idx, tok_arr] += coeff

        if beta != 0.0:
            q = token_distributions(other, enc, toks, ctx=other_ctx)
            if cfg.kl_estimator == "exact":
                kl_t = kl_exact(p, q)
                dkl = p * (np.log(p) - np.log(q) - kl_t[:, None])
            else:
                r = q[idx, tok_arr] / p[idx, tok_arr]
                kl_t = r - np.log(r) - 1.0
                dkl = (1.0 - r)[:, None] * (-p)
                dkl[idx, tok_arr] += 1.0 - r
            if cfg.kl_cap is not None:
                over = kl_t > cfg.kl_cap
                kl_t = np.minimum(kl_t, cfg.kl_cap)
                dkl[over] = 0.0
            kl_sum += kl_t.mean()
            dlogits += cfg.kl_sign * beta * dkl

        grad += backprop_token_grads(params, enc, toks, dlogits / (g * t_len), ctx=ctx)

    surrogate = surrogate_sum / g
    kl_mean = kl_sum / g
    objective = surrogate + cfg.kl_sign * beta * kl_mean
    return ObjectiveReport(objective=objective, surrogate=surrogate, kl_mean=kl_mean), grad


def grpo_objective(params, ref, enc, rollout, cfg=None) -> ObjectiveReport:
    cfg = cfg or TrainerConfig(mode="grpo")
    return objective_and_gradient(params, ref, enc, rollout, cfg)[0]


def bias_objective(params, enc, rollout, cfg=None) -> ObjectiveReport:
    cfg = cfg or TrainerConfig(mode="bias")
    return objective_and_gradient(params, None, enc, rollout, cfg)[0]


def cdpo_objective(params, bias_model, enc, rollout, cfg=None) -> ObjectiveReport:
    cfg = cfg or TrainerConfig(mode="cdpo")
    return objective_and_gradient(params, bias_model, enc, rollout, cfg)[0]


@dataclass
class TrainState:
    params: PolicyParams
    config: TrainerConfig
    step: int = 0
    adam_updates: int = 0
    adam_m: np.ndarray = field(default=None, repr=False)
    adam_v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.params.flat)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.params.flat)


def train_step(
    state: TrainState,
    batch: list[tuple[np.ndarray, Question]],
    other: PolicyParams | None,
    rng: np.random.Generator,
    weights: RewardWeights = RewardWeights(),
) -> dict:
    """One optimization step over a batch of (encoding, question) pairs.

    Responses are sampled from the current parameters, which also act as
    the behaviour policy (a single inner update per rollout batch).
    Returns a flat metrics dict suitable for jsonl logging.
    """
    cfg = state.config
    grad = np.zeros_like(state.params.flat)
    objective = surrogate = kl_mean = 0.0
    all_rewards: list[np.ndarray] = []
    fmt_hits = 0
    answered = 0
    letters_emitted = 0

    for enc, question in batch:
        rollout = rollout_group(
            state.params, enc, question, cfg.group_size, rng, cfg.max_tokens, weights
        )
        report, g = objective_and_gradient(state.params, other, enc, rollout, cfg)
        grad += g / len(batch)
        objective += report.objective / len(batch)
        surrogate += report.surrogate / len(batch)
        kl_mean += report.kl_mean / len(batch)
        all_rewards.append(rollout.rewards)
        for toks in rollout.tokens:
            parsed = total_reward(toks, question, weights).parsed
            if parsed is not None:
                fmt_hits += 1
                answered += 1
                letters_emitted += len(parsed)

    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient at step {state.step}")

    # an all-degenerate batch (every group's rewards identical, no KL term)
    # carries no learning signal; running the optimizer anyway lets stale
    # Adam momentum replay the last sparse hit dozens of times, which at
    # this parameter scale collapses the policy
    if np.any(grad != 0.0):
        lr = cfg.learning_rate
        if cfg.optimizer == "sgd":
            state.params.flat += lr * grad
        else:
            state.adam_updates += 1
            state.adam_m = _ADAM_B1 * state.adam_m + (1 - _ADAM_B1) * grad
            state.adam_v = _ADAM_B2 * state.adam_v + (1 - _ADAM_B2) * grad * grad
            m_hat = state.adam_m / (1 - _ADAM_B1**state.adam_updates)
            v_hat = state.adam_v / (1 - _ADAM_B2**state.adam_updates)
            state.params.flat += lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)

    rewards = np.concatenate(all_rewards)
    metrics = {
        "step": state.step,
        "mode": cfg.mode,
        "objective": float(objective),
        "surrogate": float(surrogate),
        "kl_mean": float(kl_mean),
        "grad_norm": float(np.linalg.norm(grad)),
        "reward_mean": float(rewards.mean()),
        "reward_std": float(rewards.std()),
        "format_rate": fmt_hits / len(rewards),
        "mean_answer_len": (letters_emitted / answered) if answered else 0.0,
    }
    state.step += 1
    return metrics
