"""Seeded RNG streams and the synthetic clustered federation generator."""

import numpy as np
import pytest

from fedstat.models import fit_ols
from fedstat.synthdata import (
    ClusterSpec,
    SeededRng,
    build_federation,
    derive_stream,
    gen_client_shard,
    gen_cluster_thetas,
)


class Cfg:
    """Minimal config duck for build_federation."""

    def __init__(self, clusters=3, peers_per_cluster=4, n_per_client=50,
                 features=5, task="regression", seed=42):
        self.clusters = clusters
        self.peers_per_cluster = peers_per_cluster
        self.n_per_client = n_per_client
        self.features = features
        self.task = task
        self.seed = seed


# ---------------------------------------------------------------- streams


def test_derive_stream_deterministic():
    a = derive_stream(5, [1, 2]).uniform01(100)
    b = derive_stream(5, [1, 2]).uniform01(100)
    assert np.array_equal(a, b)


def test_derive_stream_label_decorrelation():
    a = derive_stream(5, [0]).uniform01(1000)
    b = derive_stream(5, [1]).uniform01(1000)
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 0.1
    assert not np.array_equal(a, b)


def test_derive_stream_seed_sensitivity():
    a = derive_stream(0, [7]).uniform01(10)
    b = derive_stream(1, [7]).uniform01(10)
    assert not np.array_equal(a, b)


def test_uniform01_range():
    u = derive_stream(5, [3]).uniform01(10000)
    assert np.all(u >= 0.0) and np.all(u < 1.0)


def test_standard_normal_moments():
    z = derive_stream(5, [4]).standard_normal((10000, 1))
    assert z.shape == (10000, 1)
    assert -0.05 < z.mean() < 0.05
    assert 0.9 < z.var() < 1.1


def test_standard_normal_substreams_same_distribution():
    # two-sample Kolmogorov distance between independent substreams
    a = np.sort(derive_stream(5, [10]).standard_normal((10000,)))
    b = np.sort(derive_stream(5, [11]).standard_normal((10000,)))
    grid = np.linspace(-4, 4, 401)
    ecdf_a = np.searchsorted(a, grid) / a.size
    ecdf_b = np.searchsorted(b, grid) / b.size
    assert np.max(np.abs(ecdf_a - ecdf_b)) < 0.05


def test_permutation_is_permutation():
    rng = derive_stream(5, [6])
    p = rng.permutation(100)
    assert np.array_equal(np.sort(p), np.arange(100))


# ---------------------------------------------------------------- generators


def test_thetas_in_range_and_distinct():
    rng = derive_stream(42, [0])
    specs = gen_cluster_thetas(rng, 3, 10)
    assert len(specs) == 3
    for s in specs:
        assert s.theta.shape == (11,)
        assert np.all(s.theta >= -10.0) and np.all(s.theta <= 10.0)
    assert not np.array_equal(specs[0].theta, specs[1].theta)
    assert not np.array_equal(specs[1].theta, specs[2].theta)


def test_thetas_centered():
    rng = derive_stream(42, [1])
    specs = gen_cluster_thetas(rng, 1000, 3)
    stack = np.stack([s.theta for s in specs])
    assert np.all(np.abs(stack.mean(axis=0)) < 1.0)


def test_shard_bias_column_and_noise_floor():
    rng = derive_stream(42, [2])
    spec = ClusterSpec(0, np.zeros(6))
    shard = gen_client_shard(rng, spec, 1000, 100, "regression")
    assert np.all(shard.X_train[:, -1] == 1.0)
    assert np.all(shard.X_test[:, -1] == 1.0)
    # theta = 0 means y is pure noise with sigma = 0.1
    assert 0.08 < shard.y_train.std() < 0.12


def test_shard_intercept_only_classification():
    rng = derive_stream(42, [3])
    theta = np.zeros(6)
    theta[-1] = 10.0
    shard = gen_client_shard(rng, ClusterSpec(0, theta), 200, 50, "classification")
    assert np.all(shard.y_train == 1.0)
    assert np.all(shard.y_test == 1.0)


def test_shard_ols_recovers_theta():
    rng = derive_stream(42, [4])
    theta = np.array([2.0, -1.0, 0.5, 3.0, -4.0, 1.5])
    shard = gen_client_shard(rng, ClusterSpec(0, theta), 1000, 100, "regression")
    beta = fit_ols(shard.X_train, shard.y_train)
    assert np.max(np.abs(beta - theta)) < 0.05


def test_shard_train_feature_views():
    rng = derive_stream(42, [5])
    shard = gen_client_shard(rng, ClusterSpec(0, np.zeros(4)), 30, 10, "regression")
    assert shard.train_features.shape == (30, 3)  # bias column excluded
    assert shard.n_train == 30
    assert np.array_equal(shard.train_labels, shard.y_train)


# ---------------------------------------------------------------- federations


def test_build_federation_counts_and_balance():
    shards = build_federation(Cfg(clusters=3, peers_per_cluster=100,
                                  n_per_client=10, features=4))
    assert len(shards) == 300
    counts = np.bincount([s.cluster_id for s in shards])
    assert np.array_equal(counts, [100, 100, 100])
    assert [s.client_id for s in shards] == list(range(300))


def test_build_federation_single_matches_direct():
    cfg = Cfg(clusters=1, peers_per_cluster=1, n_per_client=20, features=3)
    shard = build_federation(cfg)[0]
    theta = gen_cluster_thetas(derive_stream(cfg.seed, [0xA11CE]), 1, 3)[0]
    direct = gen_client_shard(derive_stream(cfg.seed, [0, 0]), theta,
                              20, 20, "regression", client_id=0)
    assert np.array_equal(shard.X_train, direct.X_train)
    assert np.array_equal(shard.y_train, direct.y_train)


def test_build_federation_byte_deterministic():
    a = build_federation(Cfg())
    b = build_federation(Cfg())
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.X_train, sb.X_train)
        assert np.array_equal(sa.y_train, sb.y_train)
        assert np.array_equal(sa.X_test, sb.X_test)
        assert np.array_equal(sa.y_test, sb.y_test)


def test_within_cluster_theta_shared():
    cfg = Cfg(clusters=2, peers_per_cluster=3, n_per_client=400, features=4)
    shards = build_federation(cfg)
    betas = {}
    for s in shards:
        betas[s.client_id] = fit_ols(s.X_train, s.y_train)
    # same cluster: OLS estimates agree to noise level; different: far apart
    same = np.max(np.abs(betas[0] - betas[1]))
    cross = np.max(np.abs(betas[0] - betas[3]))
    assert same < 0.1
    assert cross > 0.5


def test_pooled_noise_sigma():
    cfg = Cfg(clusters=3, peers_per_cluster=40, n_per_client=1000, features=5)
    shards = build_federation(cfg)
    thetas = gen_cluster_thetas(derive_stream(cfg.seed, [0xA11CE]), 3, 5)
    resid = []
    for s in shards:
        resid.append(s.y_train - s.X_train @ thetas[s.cluster_id].theta)
    pooled = np.concatenate(resid)
    assert pooled.size >= 10**5
    assert 0.095 < pooled.std() < 0.105


def test_classification_label_balance():
    cfg = Cfg(clusters=3, peers_per_cluster=10, n_per_client=200,
              task="classification", seed=42)
    shards = build_federation(cfg)
    for c in range(3):
        ys = np.concatenate([s.y_train for s in shards if s.cluster_id == c])
        assert set(np.unique(ys)) <= {0.0, 1.0}
        frac = ys.mean()
        assert 0.2 < frac < 0.8
