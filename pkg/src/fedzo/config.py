"""Experiment configuration: TOML parsing, defaults and validation.

Every section is a dataclass. Unknown keys and out-of-range values raise
:class:`ConfigError` naming the offending ``[section].key``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

TASKS = ("quadratic", "rosenbrock", "logistic", "hidden-prompt", "remote")
OPTIMIZERS = ("spsa", "pge", "bo")
STRATEGIES = ("iid", "dirichlet", "pathological")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


@dataclass(frozen=True)
class TaskConfig:
    name: str = "quadratic"
    num_examples: int = 1000
    num_classes: int = 10

    def check(self):
        if self.name not in TASKS:
            yield "name", f"must be one of {', '.join(TASKS)}"
        if self.num_examples < 0:
            yield "num_examples", "must be >= 0"
        if self.num_classes < 1:
            yield "num_classes", "must be >= 1"


@dataclass(frozen=True)
class OracleConfig:
    dim: int = 10
    curvature: float = 1.0
    center: tuple[float, ...] = (0.0,)
    spread: float = 1.0
    vocab_size: int = 200
    penalty: float = 1.0
    target: tuple[int, ...] = ()
    generator: str = "additive-clip"
    epsilon: float = 1.0
    clip_lo: float = 0.0
    clip_hi: float = 1.0
    endpoint: str = ""
    task_id: str = "default"
    batch_size: int = 64
    timeout_ms: float = 30000.0
    token: str = ""

    def check(self):
        if self.dim < 1:
            yield "dim", "must be >= 1"
        if not self.curvature > 0:
            yield "curvature", "must be > 0"
        if len(self.center) not in (1, self.dim):
            yield "center", "must be a scalar or have length dim"
        if self.spread < 0:
            yield "spread", "must be >= 0"
        if self.vocab_size < 1:
            yield "vocab_size", "must be >= 1"
        if self.penalty < 0:
            yield "penalty", "must be >= 0"
        if any(t < 0 or t >= self.vocab_size for t in self.target):
            yield "target", "tokens must lie in [0, vocab_size)"
        if self.generator not in ("identity", "additive-clip", "affine"):
            yield "generator", "must be identity, additive-clip or affine"
        if not 0 <= self.epsilon <= 1:
            yield "epsilon", "must lie in [0, 1]"
        if not self.clip_lo < self.clip_hi:
            yield "clip_lo", "must be below clip_hi"
        if self.batch_size < 1:
            yield "batch_size", "must be >= 1"
        if not self.timeout_ms > 0:
            yield "timeout_ms", "must be > 0"


@dataclass(frozen=True)
class SpsaSection:
    alpha: float = 0.01
    lr: float = 0.5
    momentum: float = 0.9
    gamma_alpha: float = 0.0
    gamma_lr: float = 0.0
    variant: str = "plain"
    n_probes: int = 1

    def check(self):
        if not self.alpha > 0:
            yield "alpha", "must be > 0"
        if not self.lr > 0:
            yield "lr", "must be > 0"
        if not 0 <= self.momentum < 1:
            yield "momentum", "must lie in [0, 1)"
        if self.gamma_alpha < 0:
            yield "gamma_alpha", "must be >= 0"
        if self.gamma_lr < 0:
            yield "gamma_lr", "must be >= 0"
        if self.variant not in ("plain", "gc"):
            yield "variant", "must be plain or gc"
        if self.n_probes < 1:
            yield "n_probes", "must be >= 1"


@dataclass(frozen=True)
class PgeSection:
    sample_size: int = 10
    prompt_length: int = 10
    lr: float = 1e-4
    floor: float = 1e-6
    variance_reduced: bool = True
    form: str = "signed"
    vocab: str = ""

    def check(self):
        if self.sample_size < (2 if self.variance_reduced else 1):
            yield "sample_size", "must be >= 2 with variance reduction (>= 1 without)"
        if self.prompt_length < 1:
            yield "prompt_length", "must be >= 1"
        if not self.lr > 0:
            yield "lr", "must be > 0"
        if not self.floor >= 0:
            yield "floor", "must be >= 0"
        if self.form not in ("signed", "score"):
            yield "form", "must be signed or score"


@dataclass(frozen=True)
class BoSection:
    dim: int = 10
    batch_size: int = 10
    n_candidates: int = 1000
    lengthscale: float = 1.0
    variance: float = 1.0
    noise: float = 1e-3
    bounds: tuple[float, ...] = (-1.0, 1.0)

    def check(self):
        if self.dim < 1:
            yield "dim", "must be >= 1"
        if self.batch_size < 1:
            yield "batch_size", "must be >= 1"
        if self.n_candidates < 1:
            yield "n_candidates", "must be >= 1"
        if not self.lengthscale > 0:
            yield "lengthscale", "must be > 0"
        if not self.variance > 0:
            yield "variance", "must be > 0"
        if self.noise < 0:
            yield "noise", "must be >= 0"
        if len(self.bounds) != 2 or not self.bounds[0] < self.bounds[1]:
            yield "bounds", "must be [lo, hi] with lo < hi"


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "spsa"
    spsa: SpsaSection = field(default_factory=SpsaSection)
    pge: PgeSection = field(default_factory=PgeSection)
    bo: BoSection = field(default_factory=BoSection)

    def check(self):
        if self.name not in OPTIMIZERS:
            yield "name", f"must be one of {', '.join(OPTIMIZERS)}"


@dataclass(frozen=True)
class PartitionConfig:
    strategy: str = "iid"
    concentration: float = 0.3
    classes_per_client: int = 2

    def check(self):
        if self.strategy not in STRATEGIES:
            yield "strategy", f"must be one of {', '.join(STRATEGIES)}"
        if not self.concentration > 0:
            yield "concentration", "must be > 0"
        if self.classes_per_client < 1:
            yield "classes_per_client", "must be >= 1"


@dataclass(frozen=True)
class FederationConfig:
    clients: int = 5
    rounds: int = 10
    local_iters: int = 10
    aggregation: str = "uniform"
    budget_per_client: int = 8000
    parallelism: int = 1

    def check(self):
        if self.clients < 1:
            yield "clients", "must be >= 1"
        if self.rounds < 0:
            yield "rounds", "must be >= 0"
        if self.local_iters < 0:
            yield "local_iters", "must be >= 0"
        if self.aggregation not in ("uniform", "sample-count"):
            yield "aggregation", "must be uniform or sample-count"
        if self.budget_per_client < 0:
            yield "budget_per_client", "must be >= 0"
        if self.parallelism < 1:
            yield "parallelism", "must be >= 1"


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs"
    timing: bool = False

    def check(self):
        if not self.dir:
            yield "dir", "must not be empty"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    task: TaskConfig = field(default_factory=TaskConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def check(self):
        if self.seed < 0:
            yield "seed", "must be >= 0"


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _section_name(path: str) -> str:
    return f"[{path}]" if path else ""


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(where, "expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(where, "expected a string")
        return value
    if origin is tuple:
        (inner, _) = typing.get_args(tp)
        if not isinstance(value, list):
            value = [value]
        return tuple(_coerce(v, inner, where) for v in value)
    raise TypeError(f"unsupported config type {tp!r}")


def _build(cls, table, path: str):
    if not isinstance(table, dict):
        raise ConfigError(_section_name(path), "expected a table")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for key, value in table.items():
        where = f"{_section_name(path)}.{key}" if path else key
        if key not in known:
            raise ConfigError(where, "unknown key")
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            values[key] = _build(tp, value, f"{path}.{key}" if path else key)
        else:
            values[key] = _coerce(value, tp, where)
    obj = cls(**values)
    for key, message in obj.check():
        raise ConfigError(f"{_section_name(path)}.{key}" if path else key, message)
    return obj


def _cross_check(cfg: ExperimentConfig) -> None:
    task, opt = cfg.task.name, cfg.optimizer.name
    if opt == "pge" and task not in ("hidden-prompt", "remote"):
        raise ConfigError("[optimizer].name", f"pge needs a discrete task, not {task!r}")
    if opt in ("spsa", "bo") and task == "hidden-prompt":
        raise ConfigError("[optimizer].name", f"{opt} needs a continuous task")
    if opt == "bo" and task != "remote" and cfg.optimizer.bo.dim > cfg.oracle.dim:
        raise ConfigError("[optimizer.bo].dim", "must not exceed [oracle].dim")
    if task == "rosenbrock" and cfg.oracle.dim < 2:
        raise ConfigError("[oracle].dim", "rosenbrock needs dim >= 2")
    if task == "remote" and not cfg.oracle.endpoint:
        raise ConfigError("[oracle].endpoint", "required for the remote task")
    if task == "hidden-prompt" and cfg.oracle.target and len(cfg.oracle.target) != cfg.optimizer.pge.prompt_length:
        raise ConfigError("[oracle].target", "length must equal [optimizer.pge].prompt_length")
    if opt == "pge" and cfg.optimizer.pge.floor * cfg.oracle.vocab_size >= 1:
        raise ConfigError("[optimizer.pge].floor", "floor times vocabulary size must be < 1")


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    _cross_check(cfg)
    return cfg


def parse_config(source: str | Path) -> ExperimentConfig:
    """Parse a TOML file path or a TOML string."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and source.endswith(".toml")):
        text = Path(source).read_text()
    else:
        text = source
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("", f"TOML parse error: {exc}") from exc
    return from_dict(data)


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def serialize(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    """Apply ``{"optimizer.pge.lr": 1e-5, ...}`` style overrides and revalidate."""
    data = to_dict(cfg)
    for key, value in overrides.items():
        parts = key.split(".")
        node = data
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node.get(part), dict):
                raise ConfigError(key, "not a valid config path")
            node = node[part]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigError(key, "not a valid config path")
        node[parts[-1]] = list(value) if isinstance(value, tuple) else value
    return from_dict(data)
