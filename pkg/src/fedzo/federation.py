"""Synchronous federated rounds: broadcast, local zeroth-order training, aggregation."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .oracle import BudgetExhausted, CallBudget, Oracle, SerialOracle
from .pge import CategoricalPromptPolicy, project_simplex_rows
from .rng import client_stream

METRIC_COLUMNS = ("round", "client_id", "loss", "best_score", "calls_used", "wall_ms")


@dataclass
class ClientState:
    client_id: int
    oracle: Oracle
    budget: CallBudget
    examples: list[int] = field(default_factory=list)
    carry: Any = None  # optimizer state that stays on the client between rounds
    round_losses: list[float] = field(default_factory=list)
    best_loss: float = math.inf

    def __post_init__(self):
        if not getattr(self.oracle, "thread_safe", True) and not isinstance(self.oracle, SerialOracle):
            self.oracle = SerialOracle(self.oracle)


@dataclass(frozen=True)
class MetricsRow:
    round: int
    client_id: str
    loss: float
    best_score: float
    calls_used: int
    wall_ms: float = 0.0

    def as_tuple(self) -> tuple:
        return (self.round, self.client_id, self.loss, self.best_score, self.calls_used, self.wall_ms)


@dataclass
class FederationState:
    global_params: Any
    clients: list[ClientState]
    rounds: int
    local_iters: int
    master_seed: int = 0
    round: int = 0
    history: list[MetricsRow] = field(default_factory=list)

    def __post_init__(self):
        if not self.clients:
            raise ValueError("federation needs at least one client")
        if self.rounds < 0 or self.local_iters < 0:
            raise ValueError("rounds and local_iters must be nonnegative")

    @property
    def done(self) -> bool:
        return self.round >= self.rounds

    def total_calls(self) -> int:
        return sum(c.budget.used for c in self.clients)


@dataclass(frozen=True)
class AggregationRule:
    weighting: str = "uniform"  # uniform | sample-count

    def __post_init__(self):
        if self.weighting not in ("uniform", "sample-count"):
            raise ValueError(f"unknown aggregation weighting {self.weighting!r}")

    def weights(self, sizes: Sequence[int]) -> list[float]:
        m = len(sizes)
        total = sum(sizes)
        if self.weighting == "uniform" or total == 0:
            return [1.0 / m] * m
        return [s / total for s in sizes]


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _weighted_mean(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    # fixed left-to-right accumulation keeps results independent of scheduling
    acc = weights[0] * arrays[0]
    for w, a in zip(weights[1:], arrays[1:]):
        acc = acc + w * a
    return acc


def _all_equal(arrays: Sequence[np.ndarray]) -> bool:
    first = arrays[0]
    return all(a.shape == first.shape and np.array_equal(a, first) for a in arrays[1:])


def aggregate(params_list: Sequence, weights: Sequence[float] | None = None):
    """Weighted coordinate mean of client uploads.

    Policies are averaged and re-projected row by row. Identical uploads
    (including a single client) come back unchanged.
    """
    if not params_list:
        raise ValueError("nothing to aggregate")
    m = len(params_list)
    if weights is None:
        weights = [1.0 / m] * m
    if len(weights) != m or any(w < 0 for w in weights):
        raise ValueError("need one nonnegative weight per upload")
    if isinstance(params_list[0], CategoricalPromptPolicy):
        floor = params_list[0].floor
        arrays = [p.probs for p in params_list]
        _check_shapes(arrays)
        if _all_equal(arrays):
            return params_list[0]
        return CategoricalPromptPolicy(project_simplex_rows(_weighted_mean(arrays, weights), floor), floor)
    arrays = [np.asarray(p, dtype=float) for p in params_list]
    _check_shapes(arrays)
    if _all_equal(arrays):
        return arrays[0].copy()
    return _weighted_mean(arrays, weights)


def _check_shapes(arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"cannot aggregate shapes {shape} and {a.shape}")


def aggregate_bo(pairs: Sequence[tuple[np.ndarray, float]]) -> tuple[np.ndarray, float]:
    """Average the clients' incumbent prompts and, separately, their scores."""
    if not pairs:
        raise ValueError("nothing to aggregate")
    thetas = [np.asarray(t, dtype=float) for t, _ in pairs]
    _check_shapes(thetas)
    scores = [float(s) for _, s in pairs]
    if len(pairs) == 1:
        return thetas[0].copy(), scores[0]
    m = len(pairs)
    w = [1.0 / m] * m
    score = 0.0
    for s in scores:
        score += s / m
    theta = thetas[0].copy() if _all_equal(thetas) else _weighted_mean(thetas, w)
    if all(s == scores[0] for s in scores):
        score = scores[0]
    return theta, score


# ---------------------------------------------------------------------------
# Local training and rounds
# ---------------------------------------------------------------------------


def local_train(client: ClientState, global_params, oracle: Oracle, optimizer, K: int, rng):
    """Run up to ``K`` optimizer iterations from the broadcast parameters.

    Running out of budget ends the loop early without raising.
    """
    client.round_losses = []
    if K == 0:
        return global_params
    state = optimizer.start(global_params, client.carry)
    for _ in range(K):
        if client.budget.remaining < optimizer.calls_per_iteration:
            break
        try:
            state, loss = optimizer.iterate(state, oracle, client.budget, rng)
        except BudgetExhausted:
            break
        client.round_losses.append(loss)
        if loss < client.best_loss:
            client.best_loss = loss
    client.carry = state
    if getattr(optimizer, "name", "") == "bo" and state.size == 0:
        return None
    return optimizer.upload(state)


def can_train(client: ClientState, optimizer) -> bool:
    return client.budget.remaining >= optimizer.calls_per_iteration


def run_round(
    state: FederationState,
    optimizer,
    rule: AggregationRule | None = None,
    parallelism: int = 1,
    timing: bool = False,
) -> FederationState:
    """One broadcast / train / upload / aggregate cycle; mutates and returns ``state``."""
    if state.done:
        raise ValueError("all rounds already completed")
    rule = rule or AggregationRule()
    t = state.round
    glob = state.global_params

    def work(client: ClientState):
        rng = client_stream(state.master_seed, client.client_id, t)
        start = time.perf_counter()
        upload = local_train(client, glob, client.oracle, optimizer, state.local_iters, rng)
        return upload, (time.perf_counter() - start) * 1000.0

    if parallelism > 1 and len(state.clients) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(work, state.clients))
    else:
        results = [work(c) for c in state.clients]

    uploads = [r[0] for r in results]
    weights = rule.weights([len(c.examples) for c in state.clients])
    if getattr(optimizer, "name", "") == "bo":
        pairs = [u for u in uploads if u is not None]
        state.global_params = aggregate_bo(pairs) if pairs else glob
    else:
        state.global_params = aggregate(uploads, weights)

    rows = []
    losses, loss_w = [], []
    for client, (_, wall), w in zip(state.clients, results, weights):
        loss = _mean(client.round_losses)
        if not math.isnan(loss):
            losses.append(loss)
            loss_w.append(w)
        rows.append(
            MetricsRow(t, str(client.client_id), loss, -client.best_loss, client.budget.used, wall if timing else 0.0)
        )
    glob_loss = math.nan
    if losses:
        total = sum(loss_w)
        glob_loss = 0.0
        for l, w in zip(losses, loss_w):
            glob_loss += l * (w / total)
    rows.append(
        MetricsRow(
            t,
            "global",
            glob_loss,
            max(r.best_score for r in rows),
            state.total_calls(),
            sum(r.wall_ms for r in rows),
        )
    )
    state.history.extend(rows)
    state.round = t + 1
    return state


def _mean(values: Sequence[float]) -> float:
    if not values:
        return math.nan
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def any_can_train(state: FederationState, optimizer) -> bool:
    return any(can_train(c, optimizer) for c in state.clients)


def run_federation(state: FederationState, optimizer, rule=None, parallelism: int = 1, timing: bool = False):
    """Run rounds until ``T`` is reached or no client can afford an iteration."""
    while not state.done and any_can_train(state, optimizer):
        run_round(state, optimizer, rule, parallelism, timing)
    return state
