"""Policy-gradient optimization of discrete prompts.

Each prompt position has its own categorical distribution over the
vocabulary. Prompts are sampled, scored by the oracle, and the
probabilities are moved along a score-function estimate, then projected
back onto the (floored) probability simplex.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .oracle import BudgetExhausted, CallBudget, Oracle, OracleInput

DEFAULT_FLOOR = 1e-6
MAX_ENUMERATION = 10**6


class InvalidPolicy(ValueError):
    pass


@dataclass(frozen=True)
class CategoricalPromptPolicy:
    probs: np.ndarray
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2 or probs.shape[0] < 1 or probs.shape[1] < 1:
            raise InvalidPolicy(f"policy must be an n x N matrix, got shape {probs.shape}")
        if not self.floor >= 0 or self.floor * probs.shape[1] >= 1:
            raise InvalidPolicy(f"floor {self.floor} infeasible for vocabulary size {probs.shape[1]}")
        sums = probs.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
        if bad.size:
            raise InvalidPolicy(f"row {bad[0]} sums to {sums[bad[0]]!r}, not 1")
        if np.any(probs < self.floor) or np.any(probs > 1.0):
            raise InvalidPolicy(f"entries must lie in [{self.floor}, 1]")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, prompt_length: int, vocab_size: int, floor: float = DEFAULT_FLOOR):
        return cls(np.full((prompt_length, vocab_size), 1.0 / vocab_size), floor)

    @property
    def prompt_length(self) -> int:
        return self.probs.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[1]

    def argmax_prompt(self) -> tuple[int, ...]:
        return tuple(int(j) for j in np.argmax(self.probs, axis=1))


def _as_policy(policy) -> CategoricalPromptPolicy:
    if isinstance(policy, CategoricalPromptPolicy):
        return policy
    return CategoricalPromptPolicy(np.asarray(policy, dtype=float), 0.0)


def _check_prompt(policy: CategoricalPromptPolicy, prompt: Sequence[int]) -> np.ndarray:
    tokens = np.asarray(prompt, dtype=int)
    if tokens.shape != (policy.prompt_length,):
        raise ValueError(f"prompt length {tokens.shape} does not match policy length {policy.prompt_length}")
    if np.any(tokens < 0) or np.any(tokens >= policy.vocab_size):
        raise ValueError("prompt token outside vocabulary")
    return tokens


def sample_prompt(policy, rng: np.random.Generator) -> tuple[int, ...]:
    """Draw one token per position, independently across positions."""
    return sample_prompts(policy, rng, 1)[0]


def sample_prompts(policy, rng: np.random.Generator, count: int) -> list[tuple[int, ...]]:
    policy = _as_policy(policy)
    cdf = np.cumsum(policy.probs, axis=1)
    u = rng.random((count, policy.prompt_length))
    # inverse-CDF per position; the clip guards against cdf[-1] < 1 by rounding
    idx = (cdf[None, :, :] < u[:, :, None]).sum(axis=2)
    idx = np.minimum(idx, policy.vocab_size - 1)
    return [tuple(int(j) for j in row) for row in idx]


def log_prob_grad(policy, prompt: Sequence[int], form: str = "signed") -> np.ndarray:
    """Per-entry quasi-gradient of the log-probability of ``prompt``.

    ``signed``: +1/p at the sampled token and -1/p everywhere else.
    ``score``: the exact derivative of log p, i.e. 1/p at the sampled
    token and 0 elsewhere.
    """
    policy = _as_policy(policy)
    tokens = _check_prompt(policy, prompt)
    rows = np.arange(policy.prompt_length)
    inv = 1.0 / policy.probs
    if form == "signed":
        out = -inv
        out[rows, tokens] = inv[rows, tokens]
    elif form == "score":
        out = np.zeros_like(inv)
        out[rows, tokens] = inv[rows, tokens]
    else:
        raise ValueError(f"unknown gradient form {form!r}")
    return out


def pge_estimate(
    policy,
    samples: Sequence[tuple[Sequence[int], float]],
    variance_reduced: bool = True,
    form: str = "signed",
) -> np.ndarray:
    """Gradient estimate from scored samples.

    Plain: mean of ``L(p) * grad log P(p)``. Variance-reduced: the losses
    are centred on the batch mean and the sum is divided by ``I - 1``.
    """
    policy = _as_policy(policy)
    count = len(samples)
    if count == 0:
        raise ValueError("need at least one scored sample")
    losses = [float(loss) for _, loss in samples]
    if variance_reduced:
        if count < 2:
            raise ValueError("variance-reduced estimate needs at least two samples")
        baseline = sum(losses) / count
        weights = [(loss - baseline) / (count - 1) for loss in losses]
    else:
        weights = [loss / count for loss in losses]
    grad = np.zeros_like(policy.probs)
    for (prompt, _), w in zip(samples, weights):
        grad += w * log_prob_grad(policy, prompt, form)
    return grad


def project_simplex(v, floor: float = 0.0) -> np.ndarray:
    """Euclidean projection onto ``{x : sum(x) == 1, x >= floor}``.

    Sort-and-threshold algorithm applied to ``v - floor`` against the
    simplex of mass ``1 - len(v) * floor``.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("project_simplex expects a nonempty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project non-finite vector")
    mass = 1.0 - v.size * floor
    if mass <= 0:
        raise ValueError(f"floor {floor} infeasible for dimension {v.size}")
    y = v - floor
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - mass
    ind = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / ind > 0)[-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(y - tau, 0.0) + floor


def project_simplex_rows(m, floor: float = 0.0) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([project_simplex(row, floor) for row in m])


def pge_step(
    policy: CategoricalPromptPolicy,
    samples: Sequence[tuple[Sequence[int], float]],
    lr: float,
    variance_reduced: bool = True,
    form: str = "signed",
) -> CategoricalPromptPolicy:
    grad = pge_estimate(policy, samples, variance_reduced, form)
    if lr == 0:
        return policy
    return CategoricalPromptPolicy(project_simplex_rows(policy.probs - lr * grad, policy.floor), policy.floor)


def _enumerate(policy: CategoricalPromptPolicy, limit: int):
    n, N = policy.probs.shape
    if N**n > limit:
        raise ValueError(f"prompt space {N}^{n} exceeds enumeration limit {limit}")
    return itertools.product(range(N), repeat=n)


def expected_loss_exact(policy, oracle: Oracle, limit: int = MAX_ENUMERATION) -> float:
    """Sum of ``L(p) * P(p)`` over every prompt in the space."""
    policy = _as_policy(policy)
    rows = range(policy.prompt_length)
    total = 0.0
    for prompt in _enumerate(policy, limit):
        prob = 1.0
        for i in rows:
            prob *= policy.probs[i, prompt[i]]
        total += oracle.loss(prompt) * prob
    return total


@dataclass(frozen=True)
class PgeConfig:
    sample_size: int = 10
    prompt_length: int = 10
    lr: float = 1e-4
    floor: float = DEFAULT_FLOOR
    variance_reduced: bool = True
    form: str = "signed"

    def __post_init__(self):
        if self.sample_size < 1 or (self.variance_reduced and self.sample_size < 2):
            raise ValueError("sample_size must be >= 2 with variance reduction, >= 1 otherwise")
        if self.prompt_length < 1:
            raise ValueError("prompt_length must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be nonnegative")
        if self.form not in ("signed", "score"):
            raise ValueError(f"unknown gradient form {self.form!r}")


class PgeOptimizer:
    name = "pge"

    def __init__(self, config: PgeConfig | None = None):
        self.config = config or PgeConfig()

    @property
    def calls_per_iteration(self) -> int:
        return self.config.sample_size

    def start(self, global_params, carry=None) -> CategoricalPromptPolicy:
        if isinstance(global_params, CategoricalPromptPolicy):
            return global_params
        return CategoricalPromptPolicy(global_params, self.config.floor)

    def iterate(self, policy, oracle: Oracle, budget: CallBudget, rng):
        cfg = self.config
        if budget.remaining < cfg.sample_size:
            raise BudgetExhausted("not enough budget for one PGE iteration")
        prompts = sample_prompts(policy, rng, cfg.sample_size)
        losses = oracle.evaluate_batch([OracleInput.prompt(p) for p in prompts], budget)
        policy = pge_step(policy, list(zip(prompts, losses)), cfg.lr, cfg.variance_reduced, cfg.form)
        return policy, sum(losses) / len(losses)

    def upload(self, policy: CategoricalPromptPolicy) -> CategoricalPromptPolicy:
        return policy
