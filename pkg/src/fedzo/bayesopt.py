"""Gaussian-process Bayesian optimization over low-dimensional soft prompts.

Scores are "higher is better"; the oracle reports losses, so
:func:`bo_round` negates them on the way in.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import ndtr

from .oracle import BudgetExhausted, CallBudget, Oracle

JITTER_START = 1e-10
JITTER_MAX = 1e-4


class FactorizationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "squared-exponential"  # or "custom"
    lengthscale: float = 1.0
    variance: float = 1.0
    # hook for kernels computed elsewhere, e.g. from instruction embeddings;
    # must map (X[n, d], Y[m, d]) -> K[n, m] and be pure
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.lengthscale > 0 or not self.variance > 0:
            raise ValueError("lengthscale and variance must be positive")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom kernel requires a callback")
        if self.kind not in ("squared-exponential", "custom"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        if self.kind == "custom":
            return np.asarray(self.fn(x, y), dtype=float)
        sq = (
            np.sum(x * x, axis=1)[:, None]
            + np.sum(y * y, axis=1)[None, :]
            - 2.0 * x @ y.T
        )
        np.maximum(sq, 0.0, out=sq)
        return self.variance * np.exp(-sq / (2.0 * self.lengthscale**2))


def _cholesky(k: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter on failure."""
    try:
        return np.linalg.cholesky(k), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(k.shape[0])
    jitter = JITTER_START
    while jitter <= JITTER_MAX:
        try:
            return np.linalg.cholesky(k + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationError("kernel matrix is not positive definite even with jitter")


@dataclass(frozen=True)
class GPState:
    """Zero-mean GP conditioned on ``(train_x, train_y)``.

    Instances are immutable; :meth:`add` returns a refactored copy.
    """

    dim: int
    kernel: KernelConfig = field(default_factory=KernelConfig)
    noise: float = 0.0
    train_x: np.ndarray = None
    train_y: np.ndarray = None
    chol: np.ndarray = None
    jitter: float = 0.0

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.train_x is None:
            object.__setattr__(self, "train_x", np.zeros((0, self.dim)))
            object.__setattr__(self, "train_y", np.zeros(0))
        if self.train_x.shape[0] != self.train_y.shape[0]:
            raise ValueError("train_x and train_y differ in length")
        if self.chol is None and self.size:
            k = self.kernel(self.train_x, self.train_x) + self.noise**2 * np.eye(self.size)
            chol, jitter = _cholesky(k)
            object.__setattr__(self, "chol", chol)
            object.__setattr__(self, "jitter", jitter)
        if self.size:
            alpha = cho_solve((self.chol, True), self.train_y)
            object.__setattr__(self, "_alpha", alpha)

    @property
    def size(self) -> int:
        return self.train_y.shape[0]

    def add(self, xs, ys) -> "GPState":
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        if xs.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim}-d points, got {xs.shape[1]}")
        return replace(
            self,
            train_x=np.vstack([self.train_x, xs]),
            train_y=np.concatenate([self.train_y, ys]),
            chol=self._extend_chol(xs),
            jitter=self.jitter,
        )

    def _extend_chol(self, xs: np.ndarray) -> np.ndarray | None:
        """Block update of the factor for appended rows; None forces a refactor."""
        if not self.size or self.jitter:
            return None
        cross = self.kernel(self.train_x, xs)
        corner = self.kernel(xs, xs) + self.noise**2 * np.eye(xs.shape[0])
        lower = solve_triangular(self.chol, cross, lower=True).T
        try:
            tail = np.linalg.cholesky(corner - lower @ lower.T)
        except np.linalg.LinAlgError:
            return None
        n, k = self.size, xs.shape[0]
        out = np.zeros((n + k, n + k))
        out[:n, :n] = self.chol
        out[n:, :n] = lower
        out[n:, n:] = tail
        return out

    def contains(self, x, y) -> bool:
        x = np.asarray(x, dtype=float)
        hits = np.all(self.train_x == x, axis=1) & (self.train_y == y)
        return bool(np.any(hits))

    def best(self) -> tuple[np.ndarray, float]:
        """Incumbent: highest observed score, first occurrence on ties."""
        if not self.size:
            raise ValueError("empty GP has no incumbent")
        i = int(np.argmax(self.train_y))
        return self.train_x[i].copy(), float(self.train_y[i])


def gp_posterior_many(gp: GPState, queries) -> tuple[np.ndarray, np.ndarray]:
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    prior = np.diag(gp.kernel(q, q)) if gp.kernel.kind == "custom" else np.full(q.shape[0], gp.kernel.variance)
    if not gp.size:
        return np.zeros(q.shape[0]), prior.copy()
    k = gp.kernel(gp.train_x, q)  # (m, c)
    mu = k.T @ gp._alpha
    v = solve_triangular(gp.chol, k, lower=True)
    var = prior - np.sum(v * v, axis=0)
    return mu, np.maximum(var, 0.0)


def gp_posterior(gp: GPState, query) -> tuple[float, float]:
    mu, var = gp_posterior_many(gp, np.asarray(query, dtype=float)[None, :])
    return float(mu[0]), float(var[0])


def expected_improvement(mu, sigma, incumbent):
    """Closed-form E[max(0, f - incumbent)] for f ~ N(mu, sigma^2).

    Accepts scalars or arrays; ``sigma == 0`` gives ``max(0, mu - incumbent)``.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    diff = mu - incumbent
    safe = np.where(sigma > 0, sigma, 1.0)
    z = diff / safe
    with np.errstate(over="ignore"):
        pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    ei = diff * ndtr(z) + safe * pdf
    out = np.where(sigma > 0, np.maximum(ei, 0.0), np.maximum(diff, 0.0))
    return float(out) if out.ndim == 0 else out


def _incumbent(gp: GPState) -> float:
    return float(np.max(gp.train_y)) if gp.size else 0.0


def propose_next(gp: GPState, bounds, n_candidates: int, rng: np.random.Generator, jitter_scale: float = 0.05):
    """Maximize EI over random box samples plus a perturbed incumbent.

    Candidate ``n_candidates`` (the last one) is the incumbent with
    Gaussian noise of ``jitter_scale`` times the box width, clipped to the
    box. Ties go to the lowest candidate index.
    """
    lo, hi = _bounds(bounds, gp.dim)
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    cands = lo + (hi - lo) * rng.random((n_candidates, gp.dim))
    if gp.size:
        best_x, _ = gp.best()
        local = np.clip(best_x + jitter_scale * (hi - lo) * rng.standard_normal(gp.dim), lo, hi)
        cands = np.vstack([cands, local])
    mu, var = gp_posterior_many(gp, cands)
    ei = expected_improvement(mu, np.sqrt(var), _incumbent(gp))
    return cands[int(np.argmax(ei))].copy()


def _bounds(bounds, dim: int) -> tuple[np.ndarray, np.ndarray]:
    b = np.asarray(bounds, dtype=float)
    if b.shape == (2,):
        b = np.tile(b, (dim, 1))
    if b.shape != (dim, 2) or not np.all(np.isfinite(b)) or np.any(b[:, 0] >= b[:, 1]):
        raise ValueError(f"bounds must be a finite ({dim}, 2) box with lo < hi")
    return b[:, 0], b[:, 1]


@dataclass(frozen=True)
class ProjectionMatrix:
    """Frozen random linear map from the search space up to the oracle's space."""

    matrix: np.ndarray

    def __post_init__(self):
        a = np.array(self.matrix, dtype=float)
        if a.ndim != 2 or not a.shape[1] < a.shape[0]:
            raise ValueError("projection must map a low dimension d to a higher d'")
        a.setflags(write=False)
        object.__setattr__(self, "matrix", a)

    @classmethod
    def sample(cls, low_dim: int, high_dim: int, rng: np.random.Generator) -> "ProjectionMatrix":
        return cls(rng.uniform(-1.0, 1.0, size=(high_dim, low_dim)))

    @property
    def low_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def high_dim(self) -> int:
        return self.matrix.shape[0]

    def digest(self) -> str:
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()


def project(a: ProjectionMatrix, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (a.low_dim,):
        raise ValueError(f"expected a {a.low_dim}-d vector, got shape {theta.shape}")
    return a.matrix @ theta


@dataclass(frozen=True)
class BoConfig:
    dim: int = 10
    batch_size: int = 10
    n_candidates: int = 1000
    lengthscale: float = 1.0
    variance: float = 1.0
    noise: float = 1e-3
    bounds: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.dim < 1 or self.batch_size < 1 or self.n_candidates < 1:
            raise ValueError("dim, batch_size and n_candidates must be >= 1")
        _bounds(self.bounds, self.dim)

    def kernel(self) -> KernelConfig:
        return KernelConfig("squared-exponential", self.lengthscale, self.variance)


def bo_round(
    gp: GPState,
    oracle: Oracle,
    budget: CallBudget,
    bounds,
    rng: np.random.Generator,
    batch_size: int = 10,
    n_candidates: int = 1000,
    projection: ProjectionMatrix | None = None,
):
    """Propose and score one batch, returning ``(gp, best_theta, best_score)``.

    Batch members after the first are chosen against the posterior
    updated with its own mean at the earlier picks, so a batch spreads out
    instead of repeating one point.
    """
    if budget.remaining < batch_size:
        raise BudgetExhausted(f"BO round needs {batch_size} calls, {budget.remaining} left")
    picks = []
    believer = gp
    for b in range(batch_size):
        x = propose_next(believer, bounds, n_candidates, rng)
        picks.append(x)
        if b + 1 < batch_size:
            believer = believer.add(x, gp_posterior(believer, x)[0])
    queries = picks if projection is None else [project(projection, x) for x in picks]
    losses = oracle.evaluate_batch(queries, budget)
    gp = gp.add(np.array(picks), -np.asarray(losses))
    best_theta, best_score = gp.best()
    return gp, best_theta, best_score


class BoOptimizer:
    """Adapter for the federation loop.

    Each client keeps its own GP across rounds. The server exchanges
    ``(theta, score)`` pairs, which clients add to their training set.
    """

    name = "bo"

    def __init__(self, config: BoConfig | None = None, projection: ProjectionMatrix | None = None):
        self.config = config or BoConfig()
        self.projection = projection

    @property
    def calls_per_iteration(self) -> int:
        return self.config.batch_size

    def new_gp(self) -> GPState:
        return GPState(self.config.dim, self.config.kernel(), self.config.noise)

    def start(self, global_params, carry: GPState | None) -> GPState:
        gp = carry if carry is not None else self.new_gp()
        if global_params is None:
            return gp
        theta, score = global_params
        # an exact duplicate adds nothing but a singular row
        if gp.contains(theta, score):
            return gp
        return gp.add(theta, score)

    def iterate(self, gp: GPState, oracle: Oracle, budget: CallBudget, rng):
        cfg = self.config
        size = gp.size
        gp, _, _ = bo_round(gp, oracle, budget, cfg.bounds, rng, cfg.batch_size, cfg.n_candidates, self.projection)
        loss = -float(np.max(gp.train_y[size:]))
        return gp, loss

    def upload(self, gp: GPState):
        theta, score = gp.best()
        return theta, score
