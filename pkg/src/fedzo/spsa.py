"""Two-point SPSA gradient estimation and momentum updates."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .oracle import BudgetExhausted, CallBudget, Oracle


@dataclass(frozen=True)
class SpsaConfig:
    alpha0: float = 0.01
    lr0: float = 0.5
    momentum: float = 0.9
    gamma_a: float = 0.0
    gamma_lr: float = 0.0
    variant: str = "plain"  # plain | gc
    n_probes: int = 1

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.gamma_a < 0 or self.gamma_lr < 0:
            raise ValueError("decay exponents must be nonnegative")
        if self.variant not in ("plain", "gc"):
            raise ValueError(f"unknown SPSA variant {self.variant!r}")
        if self.n_probes < 1:
            raise ValueError("n_probes must be >= 1")


@dataclass(frozen=True)
class SpsaState:
    theta: np.ndarray
    velocity: np.ndarray
    step: int = 0

    @classmethod
    def start(cls, theta) -> "SpsaState":
        theta = np.array(theta, dtype=float)
        return cls(theta, np.zeros_like(theta), 0)

    def __post_init__(self):
        if self.theta.shape != self.velocity.shape:
            raise ValueError("velocity and theta differ in shape")


def perturbation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Rademacher direction: every entry is -1 or +1."""
    if dim < 1:
        raise ValueError("perturbation dimension must be >= 1")
    return 2.0 * rng.integers(0, 2, size=dim).astype(float) - 1.0


def estimate_gradient(oracle: Oracle, theta, alpha: float, q, budget: CallBudget) -> np.ndarray:
    """Central-difference estimate along ``q``; costs exactly two calls."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    theta = np.asarray(theta, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(q == 0):
        raise ValueError("perturbation entries must be nonzero")
    return _two_point(oracle, theta, alpha, q, budget)[0]


def _two_point(oracle, theta, alpha, q, budget):
    if budget.remaining < 2:
        raise BudgetExhausted(f"SPSA estimate needs 2 calls, {budget.remaining} left")
    plus, minus = oracle.evaluate_batch([theta + alpha * q, theta - alpha * q], budget)
    return (plus - minus) / (2.0 * alpha) * (1.0 / q), 0.5 * (plus + minus)


def schedules(config: SpsaConfig, t: int) -> tuple[float, float]:
    if t < 0:
        raise ValueError("t must be nonnegative")
    alpha_t = config.alpha0 / (t + 1) ** config.gamma_a
    lr_t = config.lr0 / (t + 1) ** config.gamma_lr
    return alpha_t, lr_t


def step(state: SpsaState, grad, config: SpsaConfig, lr: float | None = None) -> SpsaState:
    """Apply one momentum update.

    ``plain`` is heavy-ball SGD; ``gc`` is the Nesterov-style lookahead
    correction. ``lr`` defaults to the schedule value at ``state.step``.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {state.theta.shape}")
    if lr is None:
        lr = schedules(config, state.step)[1]
    mu = config.momentum
    if config.variant == "plain":
        v = mu * state.velocity + grad
        theta = state.theta - lr * v
    else:
        v = mu * state.velocity - lr * grad
        theta = state.theta + mu * v - lr * grad
    return SpsaState(theta, v, state.step + 1)


class SpsaOptimizer:
    """Adapter used by the federation loop.

    The momentum buffer and step counter stay with the client across
    rounds; only ``theta`` is exchanged with the server.
    """

    name = "spsa"

    def __init__(self, config: SpsaConfig | None = None):
        self.config = config or SpsaConfig()

    @property
    def calls_per_iteration(self) -> int:
        return 2 * self.config.n_probes

    def start(self, global_params, carry: SpsaState | None) -> SpsaState:
        theta = np.array(global_params, dtype=float)
        if carry is None:
            return SpsaState.start(theta)
        return replace(carry, theta=theta)

    def iterate(self, state: SpsaState, oracle: Oracle, budget: CallBudget, rng) -> tuple[SpsaState, float]:
        if budget.remaining < self.calls_per_iteration:
            raise BudgetExhausted("not enough budget for one SPSA iteration")
        alpha, lr = schedules(self.config, state.step)
        grad = np.zeros_like(state.theta)
        losses = 0.0
        for _ in range(self.config.n_probes):
            q = perturbation(state.theta.shape[0], rng)
            g, loss = _two_point(oracle, state.theta, alpha, q, budget)
            grad = grad + g
            losses += loss
        n = self.config.n_probes
        if n > 1:
            grad = grad / n
        return step(state, grad, self.config, lr), losses / n

    def upload(self, state: SpsaState) -> np.ndarray:
        return state.theta.copy()
