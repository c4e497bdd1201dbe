"""Black-box loss oracles, prompt/input coupling and call budgets.

Oracles always report a loss (lower is better). Optimizers that maximize a
score negate at their own boundary.
"""

from __future__ import annotations

import json
import math
import os
import socket
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class BudgetExhausted(RuntimeError):
    """Raised when an evaluation would exceed the call budget."""


class DimensionMismatch(ValueError):
    pass


class RemoteError(RuntimeError):
    """Transport or format failure talking to a remote oracle."""


class RemoteTimeout(RemoteError):
    pass


class RemoteStatusError(RemoteError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"remote oracle returned HTTP {status}: {body[:200]}")
        self.status = status


class MalformedResponse(RemoteError):
    pass


# ---------------------------------------------------------------------------
# Budget
# ---------------------------------------------------------------------------


class CallBudget:
    """Counter of oracle evaluations with a hard limit.

    ``reserve`` is atomic: it either takes all ``n`` calls or raises
    without touching the counter. ``release`` gives back a reservation
    whose evaluation failed.
    """

    def __init__(self, limit: int, used: int = 0):
        if limit < 0 or used < 0 or used > limit:
            raise ValueError(f"invalid budget: used={used}, limit={limit}")
        self.limit = int(limit)
        self._used = int(used)
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    @property
    def remaining(self) -> int:
        return self.limit - self._used

    def reserve(self, n: int = 1) -> None:
        with self._lock:
            if self._used + n > self.limit:
                raise BudgetExhausted(
                    f"budget exhausted: {self._used} used, {n} requested, limit {self.limit}"
                )
            self._used += n

    def release(self, n: int) -> None:
        with self._lock:
            if n > self._used:
                raise ValueError("releasing more calls than were reserved")
            self._used -= n

    def __repr__(self) -> str:
        return f"CallBudget(limit={self.limit}, used={self._used})"


# ---------------------------------------------------------------------------
# Inputs and coupling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleInput:
    """Exactly one of ``continuous`` or ``tokens`` is set."""

    continuous: np.ndarray | None = None
    tokens: tuple[int, ...] | None = None
    sample_id: int = 0

    def __post_init__(self):
        if (self.continuous is None) == (self.tokens is None):
            raise ValueError("OracleInput needs exactly one of continuous or tokens")
        if self.continuous is not None:
            v = np.asarray(self.continuous, dtype=float)
            if v.ndim != 1 or not np.all(np.isfinite(v)):
                raise ValueError("continuous input must be a finite 1-d vector")
            object.__setattr__(self, "continuous", v)
        else:
            toks = tuple(int(t) for t in self.tokens)
            if any(t < 0 for t in toks):
                raise ValueError("token indices must be nonnegative")
            object.__setattr__(self, "tokens", toks)

    @classmethod
    def vector(cls, v) -> "OracleInput":
        return cls(continuous=np.asarray(v, dtype=float))

    @classmethod
    def prompt(cls, tokens: Sequence[int], sample_id: int = 0) -> "OracleInput":
        return cls(tokens=tuple(tokens), sample_id=sample_id)

    def to_json(self) -> dict:
        if self.continuous is not None:
            return {"continuous": [float(x) for x in self.continuous]}
        return {"tokens": list(self.tokens), "sample_id": int(self.sample_id)}


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = "additive-clip"  # identity | additive-clip | affine
    epsilon: float = 1.0
    clip_lo: float = 0.0
    clip_hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "additive-clip", "affine"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")


def couple(generator: GeneratorConfig, prompt, sample) -> np.ndarray:
    """Blend a prompt into an input sample: ``clip(sample + epsilon * prompt)``."""
    sample = np.asarray(sample, dtype=float)
    if generator.kind == "identity":
        return sample.copy()
    prompt = np.asarray(prompt, dtype=float)
    if prompt.shape != sample.shape:
        raise DimensionMismatch(f"prompt shape {prompt.shape} != sample shape {sample.shape}")
    if generator.epsilon == 0.0:
        return sample.copy()
    out = sample + generator.epsilon * prompt
    if generator.kind == "additive-clip":
        out = np.clip(out, generator.clip_lo, generator.clip_hi)
    return out


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


class Oracle:
    """Base class. Subclasses implement ``loss``; callers go through
    ``evaluate`` / ``evaluate_batch`` which charge the budget."""

    input_kind = "continuous"  # or "discrete"
    thread_safe = True

    def loss(self, x) -> float:
        raise NotImplementedError

    def _coerce(self, x):
        if isinstance(x, OracleInput):
            return x.continuous if self.input_kind == "continuous" else x.tokens
        if self.input_kind == "continuous":
            return np.asarray(x, dtype=float)
        return tuple(int(t) for t in x)

    def evaluate(self, x, budget: CallBudget) -> float:
        budget.reserve(1)
        try:
            value = float(self.loss(self._coerce(x)))
        except BaseException:
            budget.release(1)
            raise
        return value

    def evaluate_batch(self, xs: Sequence, budget: CallBudget) -> list[float]:
        n = len(xs)
        budget.reserve(n)
        try:
            values = [float(self.loss(self._coerce(x))) for x in xs]
        except BaseException:
            budget.release(n)
            raise
        return values


def evaluate(oracle: Oracle, x, budget: CallBudget) -> float:
    return oracle.evaluate(x, budget)


class QuadraticOracle(Oracle):
    def __init__(self, center, curvature: float = 1.0):
        self.center = np.asarray(center, dtype=float)
        self.curvature = float(curvature)
        if self.center.ndim != 1:
            raise ValueError("center must be a vector")
        if self.curvature <= 0:
            raise ValueError("curvature must be positive")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def loss(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != self.center.shape:
            raise DimensionMismatch(f"expected dim {self.dim}, got shape {x.shape}")
        diff = x - self.center
        return self.curvature * float(diff @ diff)


class RosenbrockOracle(Oracle):
    def __init__(self, dim: int = 2):
        if dim < 2:
            raise ValueError("rosenbrock needs dim >= 2")
        self.dim = dim

    def loss(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionMismatch(f"expected dim {self.dim}, got shape {x.shape}")
        return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


class LogisticOracle(Oracle):
    """Frozen linear softmax classifier scored on prompted inputs.

    The loss of a prompt is the mean cross-entropy over the oracle's
    examples after coupling the prompt into each feature vector.
    """

    def __init__(self, weights, features, labels, generator: GeneratorConfig | None = None):
        self.weights = np.asarray(weights, dtype=float)
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        self.generator = generator or GeneratorConfig()
        if self.features.ndim != 2 or self.features.shape[1] != self.weights.shape[1]:
            raise DimensionMismatch("features and classifier weights disagree on dimension")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels differ in length")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def loss(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionMismatch(f"expected dim {self.dim}, got shape {x.shape}")
        if self.labels.size == 0:
            return 0.0
        inputs = couple(self.generator, np.broadcast_to(x, self.features.shape), self.features)
        logits = inputs @ self.weights.T
        top = logits.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
        return float(np.mean(lse - logits[np.arange(self.labels.size), self.labels]))


class HiddenPromptOracle(Oracle):
    """Weighted Hamming distance between a queried prompt and a hidden target."""

    input_kind = "discrete"

    def __init__(self, target: Sequence[int], penalty=1.0, vocab_size: int | None = None):
        self.target = tuple(int(t) for t in target)
        pen = np.broadcast_to(np.asarray(penalty, dtype=float), (len(self.target),))
        if np.any(pen < 0):
            raise ValueError("penalties must be nonnegative")
        self.penalty = pen.copy()
        self.vocab_size = vocab_size
        if vocab_size is not None and any(t >= vocab_size for t in self.target):
            raise ValueError("target token outside vocabulary")

    def loss(self, tokens) -> float:
        tokens = tuple(tokens)
        if len(tokens) != len(self.target):
            raise DimensionMismatch(f"expected {len(self.target)} tokens, got {len(tokens)}")
        if self.vocab_size is not None and any(t >= self.vocab_size for t in tokens):
            raise ValueError("token index outside vocabulary")
        total = 0.0
        for t, h, p in zip(tokens, self.target, self.penalty):
            if t != h:
                total += p
        return total


class SerialOracle(Oracle):
    """Wraps a non-thread-safe oracle so concurrent clients take turns."""

    def __init__(self, inner: Oracle):
        self.inner = inner
        self.input_kind = inner.input_kind
        self._lock = threading.Lock()

    def loss(self, x) -> float:
        with self._lock:
            return self.inner.loss(x)

    def evaluate(self, x, budget):
        with self._lock:
            return self.inner.evaluate(x, budget)

    def evaluate_batch(self, xs, budget):
        with self._lock:
            return self.inner.evaluate_batch(xs, budget)


def make_synthetic(settings: dict) -> Oracle:
    """Build a synthetic oracle from a ``{"kind": ..., **params}`` mapping."""
    params = dict(settings)
    kind = params.pop("kind", None)
    if kind == "quadratic":
        return QuadraticOracle(params["center"], params.get("curvature", 1.0))
    if kind == "rosenbrock":
        return RosenbrockOracle(params.get("dim", 2))
    if kind == "logistic-synthetic":
        gen = params.get("generator")
        if isinstance(gen, dict):
            gen = GeneratorConfig(**gen)
        return LogisticOracle(params["weights"], params["features"], params["labels"], gen)
    if kind == "hidden-prompt":
        return HiddenPromptOracle(params["target"], params.get("penalty", 1.0), params.get("vocab_size"))
    raise ValueError(f"unknown synthetic oracle kind {kind!r}")


# ---------------------------------------------------------------------------
# Remote oracle
# ---------------------------------------------------------------------------

DEFAULT_TIMEOUT_MS = 30000


def _timeout_seconds(timeout_ms: float | None) -> float:
    if timeout_ms is None:
        timeout_ms = float(os.environ.get("FEDZO_ORACLE_TIMEOUT_MS", DEFAULT_TIMEOUT_MS))
    return timeout_ms / 1000.0


def _as_input(x) -> OracleInput:
    if isinstance(x, OracleInput):
        return x
    return OracleInput.vector(x)


def remote_evaluate(
    endpoint: str,
    batch: Sequence,
    budget: CallBudget,
    task_id: str = "default",
    timeout_ms: float | None = None,
    token: str | None = None,
) -> list[float]:
    """POST one batch to ``{endpoint}/evaluate`` and return its losses in order.

    The budget is checked before any network traffic and rolled back if
    the request fails, so a failed call never counts.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    inputs = [_as_input(x) for x in batch]
    n = len(inputs)
    budget.reserve(n)
    try:
        losses = _post(endpoint, task_id, inputs, _timeout_seconds(timeout_ms), token)
    except BaseException:
        budget.release(n)
        raise
    return losses


def _post(endpoint, task_id, inputs, timeout, token) -> list[float]:
    body = json.dumps({"task_id": task_id, "inputs": [x.to_json() for x in inputs]}).encode()
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    req = urllib.request.Request(
        endpoint.rstrip("/") + "/evaluate", data=body, headers=headers, method="POST"
    )
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            status = resp.status
            raw = resp.read()
    except urllib.error.HTTPError as exc:
        raise RemoteStatusError(exc.code, exc.read().decode(errors="replace")) from exc
    except (socket.timeout, TimeoutError) as exc:
        raise RemoteTimeout(f"remote oracle timed out after {timeout:.3f}s") from exc
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            raise RemoteTimeout(f"remote oracle timed out after {timeout:.3f}s") from exc
        raise RemoteError(f"cannot reach remote oracle: {exc.reason}") from exc
    if status != 200:
        raise RemoteStatusError(status, raw.decode(errors="replace"))
    try:
        payload = json.loads(raw)
        losses = payload["losses"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedResponse("response body is not {\"losses\": [...]}") from exc
    if not isinstance(losses, list) or len(losses) != len(inputs):
        got = len(losses) if isinstance(losses, list) else type(losses).__name__
        raise MalformedResponse(f"expected {len(inputs)} losses, got {got}")
    try:
        out = [float(v) for v in losses]
    except (TypeError, ValueError) as exc:
        raise MalformedResponse("non-numeric loss in response") from exc
    if not all(math.isfinite(v) for v in out):
        raise MalformedResponse("non-finite loss in response")
    return out


@dataclass
class RemoteOracle(Oracle):
    endpoint: str
    task_id: str = "default"
    input_kind: str = "continuous"
    batch_size: int = 64
    timeout_ms: float | None = None
    token: str | None = field(default=None, repr=False)

    def _wrap(self, x) -> OracleInput:
        if isinstance(x, OracleInput):
            return x
        if self.input_kind == "continuous":
            return OracleInput.vector(x)
        return OracleInput.prompt(x)

    def loss(self, x) -> float:
        raise NotImplementedError("remote oracles can only be queried through a budget")

    def evaluate(self, x, budget):
        return self.evaluate_batch([x], budget)[0]

    def evaluate_batch(self, xs, budget):
        inputs = [self._wrap(x) for x in xs]
        if len(inputs) > budget.remaining:
            raise BudgetExhausted(
                f"budget exhausted: {budget.used} used, {len(inputs)} requested, limit {budget.limit}"
            )
        out: list[float] = []
        for start in range(0, len(inputs), self.batch_size):
            chunk = inputs[start : start + self.batch_size]
            out.extend(
                remote_evaluate(self.endpoint, chunk, budget, self.task_id, self.timeout_ms, self.token)
            )
        return out
