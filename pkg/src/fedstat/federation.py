"""Federated training loop: preparation, local updates, aggregation.

The protocol has three stages.  Preparation computes each client's stats
vector once, locally.  Training runs synchronous rounds with full
participation: every client pulls the current parameters, trains on its
own shard, and the server merges the proposals by data-weighted average
(fedavg) or merges averaged full-batch gradients into a single server
optimizer step (fedsgd).  Inference is the evaluate pass at the end.

Every round each client starts from the merged parameters with fresh
optimizer state; nothing persists on a client between rounds except its
shard and stats vector.  All randomness comes from streams derived off
the run seed, so a run is reproducible byte for byte.

Privacy is structural: client_stats and local updates receive a single
shard, aggregation sees only flat proposals, and nothing else crosses
the client boundary.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericError, ParamSet, adamw_step, sgd_step
from .models import ModelAdapter, adapter_for, fit_baseline
from .stats import CrossCovariance, client_stats
from .synthdata import SeededRng, derive_stream

__all__ = [
    "ConfigError",
    "FederationConfig",
    "RoundReport",
    "TrainRecord",
    "RunResult",
    "thread_count",
    "prepare",
    "local_update",
    "local_gradient",
    "aggregate_fedavg",
    "aggregate_fedsgd",
    "evaluate",
    "run",
]

_INIT_LABEL = 0x12A7
_SHUFFLE_LABEL = 0x5F1E

TASKS = ("regression", "classification", "emnist")
MODELS = ("cond_linear", "ensemble", "mlp", "cnn",
          "baseline_global", "baseline_cluster", "baseline_client")
AGGREGATIONS = ("fedavg", "fedsgd")


class ConfigError(ValueError):
    """A config field failed validation; message names the field."""


@dataclass
class FederationConfig:
    task: str = "regression"
    model: str = "cond_linear"
    clusters: int = 3
    peers_per_cluster: int = 20
    n_per_client: int = 100
    features: int = 10
    stats_recipe: object = None
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 100
    lr: float = 1e-3
    wd: float = 1e-3
    aggregation: str = "fedavg"
    seed: int = 42
    # Extras beyond the core schema; defaults preserve the core behavior.
    n_test_per_client: int | None = None
    local_optimizer: str = "adamw"
    server_optimizer: str = "sgd"
    ensemble_width: int = 8
    mlp_hidden: tuple = (64, 64)
    eval_every: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task: {self.task!r} not one of {TASKS}")
        if self.model not in MODELS:
            raise ConfigError(f"model: {self.model!r} not one of {MODELS}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(
                f"aggregation: {self.aggregation!r} not one of {AGGREGATIONS}")
        for name in ("clusters", "peers_per_cluster", "features",
                     "batch_size", "ensemble_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.n_per_client < 2:
            raise ConfigError("n_per_client: must be >= 2 (stats need 2 rows)")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("rounds/local_epochs: must be >= 0")
        if self.batch_size > self.n_per_client:
            raise ConfigError("batch_size: must be <= n_per_client")
        if self.lr <= 0:
            raise ConfigError("lr: must be > 0")
        if self.wd < 0:
            raise ConfigError("wd: must be >= 0")
        if self.local_optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"local_optimizer: {self.local_optimizer!r}")
        if self.server_optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"server_optimizer: {self.server_optimizer!r}")


@dataclass
class RoundReport:
    """Evaluation snapshot: per-client metric plus cluster/global rollups.

    ``round`` is the index of the last completed round, or -1 when the
    evaluation ran before any training.
    """
    round: int
    metric: str
    client_ids: list
    per_client_metric: np.ndarray
    cluster_ids: list
    per_cluster_mean: np.ndarray
    global_mean: float


@dataclass
class TrainRecord:
    round: int
    mean_loss: float


@dataclass
class RunResult:
    params: object
    reports: list = field(default_factory=list)
    history: list = field(default_factory=list)
    model: str = ""
    aggregation: str = ""

    @property
    def final_report(self) -> RoundReport:
        return self.reports[-1]


def thread_count() -> int:
    """Worker count from FEDSTAT_THREADS: unset/1 sequential, 0 = all cores."""
    raw = os.environ.get("FEDSTAT_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FEDSTAT_THREADS: must be an integer, got {raw!r}")
    if n < 0:
        raise ConfigError("FEDSTAT_THREADS: must be >= 0")
    return os.cpu_count() or 1 if n == 0 else n


def _client_map(fn, shards, workers):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, shards))
    return [fn(s) for s in shards]


def prepare(shards, recipe=None) -> int:
    """Stage one: compute every client's stats vector on its own shard.

    Returns the shared mu length; uneven lengths across clients are a
    config error because the server model has one fixed shape.
    """
    recipe = recipe if recipe is not None else CrossCovariance()
    workers = thread_count()

    def one(shard):
        shard.stats = client_stats(shard, recipe)
        return shard.stats.mu.shape[0]

    lengths = set(_client_map(one, shards, workers))
    if len(lengths) != 1:
        raise ConfigError(f"clients produced unequal mu lengths {sorted(lengths)}")
    return lengths.pop()


def _epoch_batches(n: int, batch_size: int, rng) -> list:
    if batch_size <= 0 or batch_size >= n:
        # Full batch: keep natural row order so the gradient matches the
        # fedsgd route float for float.
        return [np.arange(n)]
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def local_update(adapter: ModelAdapter, ps: ParamSet, shard, config,
                 round_index: int):
    """Train one client for its local epochs; returns the proposal.

    ``ps`` holds the server parameters and whatever optimizer state the
    caller chose to hand over (the round loop passes a fresh copy, so
    local moments start clean every round).
    Returns (client_id, n_rows, flat_values, mean_loss).
    """
    X, y, mu = adapter.client_arrays(shard, train=True)
    rng = derive_stream(config.seed,
                                  [_SHUFFLE_LABEL, round_index, shard.client_id])
    losses = []
    try:
        for _ in range(config.local_epochs):
            for idx in _epoch_batches(X.shape[0], config.batch_size, rng):
                loss = adapter.loss_grad(ps, X[idx], y[idx], mu, shard.task)
                losses.append(loss)
                if config.local_optimizer == "adamw":
                    adamw_step(ps, lr=config.lr, wd=config.wd)
                elif config.local_optimizer == "sgd":
                    sgd_step(ps, lr=config.lr)
                else:
                    raise ConfigError(
                        f"local_optimizer: {config.local_optimizer!r}")
    except NumericError as exc:
        raise NumericError(
            f"aborted at round {round_index}, client {shard.client_id}: {exc}"
        ) from exc
    mean_loss = float(np.mean(losses)) if losses else 0.0
    if not np.isfinite(mean_loss):
        raise NumericError(
            f"aborted at round {round_index}, client {shard.client_id}: "
            f"non-finite training loss")
    return shard.client_id, shard.n_train, ps.value.copy(), mean_loss


def local_gradient(adapter: ModelAdapter, ps: ParamSet, shard, config,
                   round_index: int):
    """Full-batch gradient proposal for the fedsgd route."""
    X, y, mu = adapter.client_arrays(shard, train=True)
    loss = adapter.loss_grad(ps, X, y, mu, shard.task)
    if not np.isfinite(loss):
        raise NumericError(
            f"aborted at round {round_index}, client {shard.client_id}: "
            f"non-finite training loss")
    return shard.client_id, shard.n_train, ps.grad.copy(), float(loss)


def _weighted_merge(proposals) -> np.ndarray:
    total = float(sum(n for _, n, _ in proposals))
    if total <= 0:
        raise ValueError("proposals carry no data rows")
    first = proposals[0][2]
    acc = np.zeros_like(first)
    for _, n, flat in sorted(proposals, key=lambda p: p[0]):
        if flat.shape != first.shape:
            raise ValueError(
                f"proposal shapes differ: {flat.shape} vs {first.shape}")
        acc += (n / total) * flat
    return acc


def aggregate_fedavg(proposals) -> np.ndarray:
    """Merge parameter proposals ``(client_id, n_rows, flat_values)``.

    Data-size weighted mean, accumulated in ascending client id so the
    result does not depend on arrival order.
    """
    return _weighted_merge(proposals)


def aggregate_fedsgd(proposals) -> np.ndarray:
    """Merge gradient proposals ``(client_id, n_rows, flat_grads)``."""
    return _weighted_merge(proposals)


def _metric_for(task, out, y):
    if task == "regression":
        err = out - y
        return "rmse", float(np.sqrt(np.mean(err ** 2)))
    if task == "classification":
        return "accuracy", float(np.mean((out > 0.0) == (y > 0.5)))
    # 62-way logits: predicted class is the argmax row-wise.
    return "accuracy", float(np.mean(np.argmax(out, axis=1) == y))


def _rollup(round_index, metric, rows) -> RoundReport:
    """rows: list of (client_id, cluster_id, value) in ascending client id."""
    client_ids = [r[0] for r in rows]
    values = np.array([r[2] for r in rows])
    cluster_ids = sorted({r[1] for r in rows})
    cluster_means = np.array([
        np.mean([v for _, cid, v in rows if cid == c]) for c in cluster_ids])
    return RoundReport(round=round_index, metric=metric, client_ids=client_ids,
                       per_client_metric=values, cluster_ids=cluster_ids,
                       per_cluster_mean=cluster_means,
                       global_mean=float(values.mean()))


def evaluate(adapter: ModelAdapter, ps: ParamSet, shards, train: bool = False,
             round_index: int = -1) -> RoundReport:
    """Per-client test metric (rmse or accuracy) with cluster/global means."""
    rows = []
    for shard in sorted(shards, key=lambda s: s.client_id):
        X, y, mu = adapter.client_arrays(shard, train=train)
        out = adapter.predict(ps, X, mu)
        metric, value = _metric_for(shard.task, out, y)
        rows.append((shard.client_id, shard.cluster_id, value))
    return _rollup(round_index, metric, rows)


def _baseline_scopes(model: str, shards):
    if model == "baseline_global":
        return [("global",)]
    if model == "baseline_cluster":
        return [("cluster", c) for c in sorted({s.cluster_id for s in shards})]
    if model == "baseline_client":
        return [("client", s.client_id) for s in shards]
    raise ConfigError(f"model: {model!r} is not a baseline")


def _run_baseline(config, shards) -> RunResult:
    """Reference fits bypass the round loop: one direct fit per scope."""
    steps = max(1, config.rounds * config.local_epochs
                * max(1, -(-config.n_per_client // config.batch_size)))
    fits = {}
    for scope in _baseline_scopes(config.model, shards):
        fits[scope] = fit_baseline(shards, scope, steps=steps,
                                   lr=config.lr, wd=config.wd)
    rows = []
    for shard in sorted(shards, key=lambda s: s.client_id):
        if config.model == "baseline_global":
            beta = fits[("global",)].beta
        elif config.model == "baseline_cluster":
            beta = fits[("cluster", shard.cluster_id)].beta
        else:
            beta = fits[("client", shard.client_id)].beta
        metric, value = _metric_for(shard.task, shard.X_test @ beta, shard.y_test)
        rows.append((shard.client_id, shard.cluster_id, value))
    report = _rollup(max(config.rounds - 1, -1), metric, rows)
    return RunResult(params=fits, reports=[report], history=[],
                     model=config.model, aggregation="none")


def run(config, shards=None, adapter: ModelAdapter | None = None) -> RunResult:
    """Drive the full protocol: prepare, rounds of train+merge, evaluate.

    ``shards`` defaults to the synthetic federation described by the
    config.  rounds=0 evaluates the initial parameters and stops.
    Baseline models skip the loop and fit their scope directly.
    """
    if hasattr(config, "validate"):
        config.validate()
    if shards is None:
        from .synthdata import build_federation
        shards = build_federation(config)
    shards = sorted(shards, key=lambda s: s.client_id)

    recipe = getattr(config, "stats_recipe", None)
    if recipe is not None or any(s.stats is None for s in shards):
        prepare(shards, recipe)

    if config.model.startswith("baseline_"):
        return _run_baseline(config, shards)

    if adapter is None:
        adapter = adapter_for(config.model, config)
    mu_len = shards[0].stats.mu.shape[0]
    x_width = shards[0].train_features.shape[1] \
        if config.model == "cnn" else shards[0].X_train.shape[1]

    rng = derive_stream(config.seed, [_INIT_LABEL])
    server = adapter.init_params(x_width, mu_len, rng)
    workers = thread_count()

    history = []
    reports = []
    if config.rounds == 0:
        reports.append(evaluate(adapter, server, shards))
        return RunResult(server, reports, history, adapter.name, config.aggregation)

    for r in range(config.rounds):
        # Each client restarts from the merged parameters with fresh
        # optimizer state; stale per-client moments drag every client back
        # toward its previous local optimum and stall the consensus.
        if config.aggregation == "fedavg":
            proposals = _client_map(
                lambda s: local_update(adapter, server.copy(), s, config, r),
                shards, workers)
            server.value[:] = aggregate_fedavg([p[:3] for p in proposals])
        else:
            proposals = _client_map(
                lambda s: local_gradient(adapter, server.copy(), s, config, r),
                shards, workers)
            server.grad[:] = aggregate_fedsgd([p[:3] for p in proposals])
            if config.server_optimizer == "sgd":
                sgd_step(server, lr=config.lr)
            else:
                adamw_step(server, lr=config.lr, wd=config.wd)

        if not np.all(np.isfinite(server.value)):
            raise NumericError(f"aborted at round {r}: non-finite merged parameters")
        history.append(TrainRecord(r, float(np.mean([p[3] for p in proposals]))))
        if config.eval_every > 0 and (r + 1) % config.eval_every == 0:
            reports.append(evaluate(adapter, server, shards, round_index=r))

    if not reports or reports[-1].round != config.rounds - 1:
        reports.append(evaluate(adapter, server, shards,
                                round_index=config.rounds - 1))
    return RunResult(server, reports, history, adapter.name, config.aggregation)
