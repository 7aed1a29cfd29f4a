"""Synthetic federated benchmarks: clusters of clients sharing a
regression/classification coefficient vector.

Randomness comes from a fully specified counter-based splitmix64 stream
so that a (seed, labels) pair reproduces the same shard bytes on any
platform.  Every client gets its own derived substream, which makes
shard generation order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .stats import LocalStats

__all__ = [
    "SeededRng",
    "derive_stream",
    "sample_standard_normal",
    "ClusterSpec",
    "ClientShard",
    "gen_cluster_thetas",
    "gen_client_shard",
    "build_federation",
    "NOISE_STD",
    "THETA_RANGE",
]

NOISE_STD = 0.1
THETA_RANGE = (-10.0, 10.0)

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_NP_GOLDEN = np.uint64(_GOLDEN)
_NP_MIX1 = np.uint64(_MIX1)
_NP_MIX2 = np.uint64(_MIX2)


def _mix_int(z: int) -> int:
    """splitmix64 finalizer on a python int (mod 2**64)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _NP_MIX1
    z = (z ^ (z >> np.uint64(27))) * _NP_MIX2
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """Counter-based splitmix64 stream: output t is mix(state + t*golden)."""

    def __init__(self, state: int):
        self._state = state & _MASK
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix_array(np.uint64(self._state) + _NP_GOLDEN * idx)

    def uniform01(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53 random bits each."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return (low + (high - low) * self.uniform01(n)).reshape(shape)

    def standard_normal(self, shape) -> np.ndarray:
        """Box-Muller transform over pairs of uniforms."""
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = (self._raw(m) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * 2.0 ** -53  # (0, 1]: keeps log finite
        u2 = self.uniform01(m)
        r = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(ang), r * np.sin(ang)])[:n]
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform01(n), kind="stable")


def derive_stream(master_seed: int, labels) -> SeededRng:
    """Deterministic substream for a label path, e.g. [cluster, peer].

    Iterated avalanche: each label folds into the state through the
    splitmix64 finalizer, so distinct label tuples (including prefixes
    and permutations) land on decorrelated streams.
    """
    s = master_seed & _MASK
    for lab in labels:
        s = _mix_int(s + _GOLDEN + (int(lab) + 1) * _MIX1)
    return SeededRng(s)


def sample_standard_normal(rng: SeededRng, n: int, k: int) -> np.ndarray:
    """i.i.d. standard normal matrix of shape (n, k)."""
    if n < 1 or k < 1:
        raise ValueError("sample_standard_normal needs n, k >= 1")
    return rng.standard_normal((n, k))


@dataclass
class ClusterSpec:
    cluster_id: int
    theta: np.ndarray  # length k+1, last entry the intercept weight


@dataclass
class ClientShard:
    """One client's private data plus its (optional) local statistics.

    The last design-matrix column is the all-ones bias; ``cluster_id`` is
    oracle bookkeeping for reports and baselines and is never fed to the
    conditional models.
    """

    client_id: int
    cluster_id: int
    task: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    stats: LocalStats | None = field(default=None)

    @property
    def train_features(self) -> np.ndarray:
        return self.X_train[:, :-1]

    @property
    def train_labels(self) -> np.ndarray:
        return self.y_train

    @property
    def label_classes(self):
        return 2 if self.task == "classification" else None

    @property
    def n_train(self) -> int:
        return self.X_train.shape[0]


def gen_cluster_thetas(rng: SeededRng, num_clusters: int, k: int) -> list[ClusterSpec]:
    """One uniform [-10, 10]^(k+1) coefficient vector per cluster."""
    if num_clusters < 1:
        raise ValueError("need at least one cluster")
    lo, hi = THETA_RANGE
    return [ClusterSpec(c, rng.uniform(lo, hi, (k + 1,))) for c in range(num_clusters)]


def _design_matrix(rng: SeededRng, n: int, k: int) -> np.ndarray:
    return np.hstack([rng.standard_normal((n, k)), np.ones((n, 1))])


def _labels(rng: SeededRng, X: np.ndarray, theta: np.ndarray, task: str) -> np.ndarray:
    score = X @ theta
    if task == "regression":
        return score + NOISE_STD * rng.standard_normal((X.shape[0],))
    if task == "classification":
        return (score > 0.0).astype(np.float64)
    raise ValueError(f"unknown task {task!r}")


def gen_client_shard(rng: SeededRng, spec: ClusterSpec, n_train: int, n_test: int,
                     task: str, client_id: int = 0) -> ClientShard:
    """Draw one client's train and test splits from its cluster model."""
    if n_train < 2:
        raise ValueError("gen_client_shard needs n_train >= 2")
    k = spec.theta.shape[0] - 1
    X_train = _design_matrix(rng, n_train, k)
    y_train = _labels(rng, X_train, spec.theta, task)
    X_test = _design_matrix(rng, n_test, k)
    y_test = _labels(rng, X_test, spec.theta, task)
    return ClientShard(client_id, spec.cluster_id, task, X_train, y_train, X_test, y_test)


def build_federation(config) -> list[ClientShard]:
    """Materialize clusters x peers shards from an experiment config.

    ``config`` needs attributes: clusters, peers_per_cluster, n_per_client,
    features, task, seed (and optionally n_test_per_client).  Client (c, i)
    draws from substream derive_stream(seed, [c, i]); thetas come from a
    dedicated substream, so the layout is reproducible per client.
    """
    clusters = config.clusters
    peers = config.peers_per_cluster
    n = config.n_per_client
    k = config.features
    if clusters < 1 or peers < 1 or n < 2:
        raise ValueError("build_federation needs clusters >= 1, peers >= 1, n >= 2")
    n_test = getattr(config, "n_test_per_client", None) or n
    theta_rng = derive_stream(config.seed, [0xA11CE])
    specs = gen_cluster_thetas(theta_rng, clusters, k)
    shards = []
    for c in range(clusters):
        for i in range(peers):
            rng = derive_stream(config.seed, [c, i])
            shard = gen_client_shard(rng, specs[c], n, n_test, config.task,
                                     client_id=c * peers + i)
            shards.append(shard)
    return shards
