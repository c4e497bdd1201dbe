"""Building and running seeded experiments from an :class:`ExperimentConfig`."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import subprocess
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, rng as rngmod
from .bayesopt import BoConfig, BoOptimizer, GPState, ProjectionMatrix
from .config import ConfigError, ExperimentConfig, serialize, with_overrides
from .federation import (
    METRIC_COLUMNS,
    AggregationRule,
    ClientState,
    FederationState,
    MetricsRow,
    run_federation,
)
from .oracle import (
    CallBudget,
    GeneratorConfig,
    HiddenPromptOracle,
    LogisticOracle,
    QuadraticOracle,
    RemoteOracle,
    RosenbrockOracle,
)
from .partition import LabeledDataset, Partition, split
from .pge import CategoricalPromptPolicy, PgeConfig, PgeOptimizer
from .spsa import SpsaConfig, SpsaOptimizer


class MetricsTable:
    """Rows of ``round, client_id, loss, best_score, calls_used, wall_ms``."""

    columns = METRIC_COLUMNS

    def __init__(self, rows: Sequence[MetricsRow] = ()):
        self.rows = list(rows)

    def __len__(self):
        return len(self.rows)

    def global_rows(self) -> list[MetricsRow]:
        return [r for r in self.rows if r.client_id == "global"]

    def final_loss(self) -> float:
        rows = self.global_rows()
        return rows[-1].loss if rows else math.nan

    def check(self) -> None:
        """Raise if rounds go backwards or a client's call count decreases."""
        last_round = -1
        calls: dict[str, int] = {}
        for r in self.rows:
            if r.round < last_round:
                raise AssertionError(f"round went backwards at {r}")
            last_round = r.round
            if r.calls_used < calls.get(r.client_id, 0):
                raise AssertionError(f"calls_used decreased for client {r.client_id}")
            calls[r.client_id] = r.calls_used

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([r.round, r.client_id, repr(float(r.loss)), repr(float(r.best_score)), r.calls_used, repr(float(r.wall_ms))])
        return buf.getvalue()


@dataclass
class Run:
    config: ExperimentConfig
    seed: int
    dataset: LabeledDataset
    partition: Partition
    state: FederationState
    optimizer: object
    rule: AggregationRule
    initial_params: object = None
    projection: ProjectionMatrix | None = None

    @property
    def metrics(self) -> MetricsTable:
        return MetricsTable(self.state.history)


def make_dataset(cfg: ExperimentConfig, seed: int) -> LabeledDataset:
    n, c = cfg.task.num_examples, cfg.task.num_classes
    gen = rngmod.stream(seed, rngmod.SETUP, 0)
    labels = gen.permutation(np.arange(n) % c) if n else np.zeros(0, dtype=np.int64)
    return LabeledDataset(np.arange(n), labels, c)


def make_partition(cfg: ExperimentConfig, ds: LabeledDataset, seed: int) -> Partition:
    p = cfg.partition
    if p.strategy == "pathological" and p.classes_per_client > ds.num_classes:
        raise ConfigError("[partition].classes_per_client", "exceeds [task].num_classes")
    return split(
        ds,
        cfg.federation.clients,
        p.strategy,
        rngmod.stream(seed, rngmod.PARTITION),
        concentration=p.concentration,
        classes_per_client=p.classes_per_client,
    )


def _center(cfg: ExperimentConfig) -> np.ndarray:
    c = np.asarray(cfg.oracle.center, dtype=float)
    return np.full(cfg.oracle.dim, c[0]) if c.size == 1 else c


def make_oracles(cfg: ExperimentConfig, ds: LabeledDataset, part: Partition, seed: int) -> list:
    """One oracle per client; heterogeneity follows each client's label mix."""
    oc = cfg.oracle
    gen = rngmod.stream(seed, rngmod.ORACLES)
    label = ds.label_of()
    task = cfg.task.name
    m = part.num_clients
    if task == "quadratic":
        protos = gen.standard_normal((ds.num_classes, oc.dim))
        base = _center(cfg)
        oracles = []
        for ids in part.clients:
            shift = protos[[label[i] for i in ids]].mean(axis=0) if ids else np.zeros(oc.dim)
            oracles.append(QuadraticOracle(base + oc.spread * shift, oc.curvature))
        return oracles
    if task == "rosenbrock":
        return [RosenbrockOracle(oc.dim) for _ in range(m)]
    if task == "logistic":
        protos = gen.uniform(0.2, 0.8, size=(ds.num_classes, oc.dim))
        weights = 4.0 * (protos - protos.mean(axis=0))
        # inputs arrive shifted away from the classifier's prototypes; a prompt can undo it
        offset = gen.uniform(-0.15, 0.15, size=oc.dim)
        noise = gen.normal(0.0, 0.05, size=(len(ds), oc.dim))
        feats = np.clip(protos[ds.labels] + offset + noise, 0.0, 1.0)
        row = {int(i): k for k, i in enumerate(ds.ids)}
        g = GeneratorConfig(oc.generator, oc.epsilon, oc.clip_lo, oc.clip_hi)
        oracles = []
        for ids in part.clients:
            idx = [row[i] for i in ids]
            oracles.append(LogisticOracle(weights, feats[idx].reshape(len(idx), oc.dim), ds.labels[idx], g))
        return oracles
    if task == "hidden-prompt":
        n = cfg.optimizer.pge.prompt_length
        target = oc.target or tuple(int(t) for t in gen.integers(0, _vocab_size(cfg), size=n))
        return [HiddenPromptOracle(target, oc.penalty, _vocab_size(cfg)) for _ in range(m)]
    if task == "remote":
        kind = "discrete" if cfg.optimizer.name == "pge" else "continuous"
        return [
            RemoteOracle(oc.endpoint, oc.task_id, kind, oc.batch_size, oc.timeout_ms, oc.token or None)
            for _ in range(m)
        ]
    raise ConfigError("[task].name", f"unknown task {task!r}")


def _vocab_size(cfg: ExperimentConfig) -> int:
    if cfg.optimizer.pge.vocab:
        entries = json.loads(Path(cfg.optimizer.pge.vocab).read_text())["entries"]
        return len(entries)
    return cfg.oracle.vocab_size


def make_optimizer(cfg: ExperimentConfig, seed: int):
    """Return ``(optimizer, initial_global_params, projection)``."""
    o = cfg.optimizer
    if o.name == "spsa":
        s = o.spsa
        opt = SpsaOptimizer(SpsaConfig(s.alpha, s.lr, s.momentum, s.gamma_alpha, s.gamma_lr, s.variant, s.n_probes))
        return opt, np.zeros(cfg.oracle.dim), None
    if o.name == "pge":
        p = o.pge
        opt = PgeOptimizer(PgeConfig(p.sample_size, p.prompt_length, p.lr, p.floor, p.variance_reduced, p.form))
        return opt, CategoricalPromptPolicy.uniform(p.prompt_length, _vocab_size(cfg), p.floor), None
    b = o.bo
    projection = None
    if b.dim < cfg.oracle.dim:
        projection = ProjectionMatrix.sample(b.dim, cfg.oracle.dim, rngmod.stream(seed, rngmod.INIT))
    bo = BoConfig(b.dim, b.batch_size, b.n_candidates, b.lengthscale, b.variance, b.noise, tuple(b.bounds))
    return BoOptimizer(bo, projection), None, projection


def build(cfg: ExperimentConfig, seed: int | None = None) -> Run:
    seed = cfg.seed if seed is None else seed
    ds = make_dataset(cfg, seed)
    part = make_partition(cfg, ds, seed)
    oracles = make_oracles(cfg, ds, part, seed)
    opt, init, projection = make_optimizer(cfg, seed)
    f = cfg.federation
    clients = [
        ClientState(i, oracles[i], CallBudget(f.budget_per_client), list(part.clients[i]))
        for i in range(f.clients)
    ]
    state = FederationState(init, clients, f.rounds, f.local_iters, seed)
    return Run(cfg, seed, ds, part, state, opt, AggregationRule(f.aggregation), init, projection)


def execute(cfg: ExperimentConfig, seed: int | None = None, parallelism: int | None = None) -> Run:
    run = build(cfg, seed)
    par = cfg.federation.parallelism if parallelism is None else parallelism
    run_federation(run.state, run.optimizer, run.rule, par, cfg.output.timing)
    return run


def _array(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def params_json(run: Run) -> dict:
    g = run.state.global_params
    name = run.optimizer.name
    out: dict = {"optimizer": name, "round": run.state.round}
    if name == "spsa":
        out["theta"] = _array(g)
    elif name == "pge":
        out["probs"] = _array(g.probs)
        out["argmax_prompt"] = list(g.argmax_prompt())
    else:
        out["theta"] = None if g is None else _array(g[0])
        out["score"] = None if g is None else float(g[1])
        if run.projection is not None:
            out["projection_sha256"] = run.projection.digest()
    return out


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


def write_run(run: Run, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = replace(run.config, seed=run.seed)
    (out_dir / "config.toml").write_text(serialize(snapshot))
    (out_dir / "metrics.csv").write_text(run.metrics.to_csv())
    (out_dir / "params.json").write_text(json.dumps(params_json(run), indent=1) + "\n")
    meta = {
        "seed": run.seed,
        "version": version_string(),
        "rng": f"philox-v{rngmod.RNG_VERSION}",
        "total_calls": run.state.total_calls(),
        "rounds_completed": run.state.round,
    }
    (out_dir / "run.json").write_text(json.dumps(meta, indent=1) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, seed: int | None = None) -> MetricsTable:
    run = execute(cfg, seed)
    if out_dir is not None:
        write_run(run, Path(out_dir))
    return run.metrics


def grid_cells(cfg: ExperimentConfig, grid: dict[str, Sequence]) -> list[tuple[dict, ExperimentConfig]]:
    """Validate every override combination up front; the product follows key order."""
    keys = list(grid)
    for k in keys:
        if not isinstance(grid[k], (list, tuple)) or not grid[k]:
            raise ConfigError(k, "grid values must be a nonempty list")
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        cells.append((overrides, with_overrides(cfg, overrides)))
    return cells


def grid_run(
    cfg: ExperimentConfig,
    grid: dict[str, Sequence],
    out_dir: str | Path | None = None,
    seed: int | None = None,
) -> list[MetricsTable]:
    """Run the Cartesian product of ``grid``; cell ``i`` uses seed ``seed + i``."""
    seed = cfg.seed if seed is None else seed
    cells = grid_cells(cfg, grid)
    tables = []
    summary = []
    for idx, (overrides, cell_cfg) in enumerate(cells):
        run = execute(cell_cfg, seed + idx)
        if out_dir is not None:
            write_run(run, Path(out_dir) / f"cell_{idx:03d}")
        table = run.metrics
        tables.append(table)
        glob = table.global_rows()
        summary.append(
            [idx, seed + idx]
            + [json.dumps(v) for v in overrides.values()]
            + [
                repr(float(table.final_loss())),
                repr(float(glob[-1].best_score)) if glob else "nan",
                run.state.total_calls(),
            ]
        )
    if out_dir is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "seed", *grid.keys(), "final_loss", "best_score", "calls_used"])
        w.writerows(summary)
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "summary.csv").write_text(buf.getvalue())
    return tables
