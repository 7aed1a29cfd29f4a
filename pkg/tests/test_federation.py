"""Federated rounds: aggregation algebra, determinism, abort paths."""

import os

import numpy as np
import pytest

from fedstat.federation import (
    ConfigError,
    FederationConfig,
    aggregate_fedavg,
    prepare,
    run,
    thread_count,
)
from fedstat.models import grad_cond_linear
from fedstat.numerics import NumericError, ParamSet, adamw_step
from fedstat.stats import CrossCovariance, DummyZeros, client_stats
from fedstat.synthdata import ClientShard, build_federation, derive_stream


def small_cfg(**kw):
    base = dict(task="regression", model="cond_linear", clusters=2,
                peers_per_cluster=2, n_per_client=30, features=4,
                rounds=3, local_epochs=1, batch_size=30, lr=0.01, wd=0.0,
                seed=7, stats_recipe=CrossCovariance())
    base.update(kw)
    return FederationConfig(**base)


def dyadic_shards(n_clients=4, n=4, k=2):
    """Shards whose entries are coarse dyadics so training stays exact.

    All values are multiples of 1/4 with small magnitude: every product
    and sum in a couple of rounds is exactly representable, making the
    fedavg and fedsgd routes bit-identical instead of merely close.
    """
    rng = derive_stream(99, [0])
    shards = []
    for i in range(n_clients):
        X = np.round(rng.uniform(-2.0, 2.0, (n, k)) * 4.0) / 4.0
        X = np.hstack([X, np.ones((n, 1))])
        y = np.round(rng.uniform(-2.0, 2.0, (n,)) * 4.0) / 4.0
        shards.append(ClientShard(client_id=i, cluster_id=0, task="regression",
                                  X_train=X, y_train=y,
                                  X_test=X.copy(), y_test=y.copy()))
    for s in shards:
        s.stats = client_stats(s, DummyZeros(k + 1))
        s.stats.mu[:] = np.array([0.5, -0.25, 1.0])
    return shards


# ---------------------------------------------------------------- config


def test_config_validation_names_fields():
    with pytest.raises(ConfigError, match="batch_size"):
        small_cfg(batch_size=31).validate()
    with pytest.raises(ConfigError, match="task"):
        small_cfg(task="ranking").validate()
    with pytest.raises(ConfigError, match="model"):
        small_cfg(model="transformer").validate()
    with pytest.raises(ConfigError, match="aggregation"):
        small_cfg(aggregation="median").validate()
    with pytest.raises(ConfigError, match="lr"):
        small_cfg(lr=0.0).validate()
    with pytest.raises(ConfigError, match="n_per_client"):
        small_cfg(n_per_client=1, batch_size=1).validate()
    small_cfg().validate()  # baseline sanity


def test_thread_count_env(monkeypatch):
    monkeypatch.delenv("FEDSTAT_THREADS", raising=False)
    assert thread_count() == 1
    monkeypatch.setenv("FEDSTAT_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("FEDSTAT_THREADS", "0")
    assert thread_count() == (os.cpu_count() or 1)
    monkeypatch.setenv("FEDSTAT_THREADS", "x")
    with pytest.raises(ConfigError, match="FEDSTAT_THREADS"):
        thread_count()
    monkeypatch.setenv("FEDSTAT_THREADS", "-1")
    with pytest.raises(ConfigError, match="FEDSTAT_THREADS"):
        thread_count()


# ---------------------------------------------------------------- preparation


def test_prepare_sets_stats_and_returns_length():
    shards = build_federation(small_cfg())
    length = prepare(shards, CrossCovariance())
    assert length == 5  # 4 feature covariances + trailing 1
    assert all(s.stats is not None for s in shards)
    assert all(s.stats.mu.shape == (5,) for s in shards)


def test_prepare_rejects_unequal_lengths():
    # two shards with different feature widths produce different mu sizes
    a = build_federation(small_cfg(features=3))[0]
    b = build_federation(small_cfg(features=5))[0]
    b.client_id = 1
    with pytest.raises(ConfigError, match="mu lengths"):
        prepare([a, b], CrossCovariance())


# ---------------------------------------------------------------- aggregation


def test_fedavg_weighted_mean():
    w = [(0, 1, np.array([1.0, 0.0])), (1, 3, np.array([0.0, 4.0]))]
    merged = aggregate_fedavg(w)
    assert np.allclose(merged, [0.25, 3.0])


def test_fedavg_order_invariant():
    rng = derive_stream(99, [1])
    props = [(i, 10 + i, rng.standard_normal((6,))) for i in range(5)]
    a = aggregate_fedavg(list(props))
    b = aggregate_fedavg(list(reversed(props)))
    assert np.array_equal(a, b)


def test_fedavg_idempotent_on_identical_proposals():
    rng = derive_stream(99, [2])
    w = rng.standard_normal((8,))
    merged = aggregate_fedavg([(i, 25, w.copy()) for i in range(4)])
    assert np.max(np.abs(merged - w)) <= 1e-15 * max(1.0, np.max(np.abs(w)))


def test_fedsgd_matches_fedavg_bitwise_on_dyadic_data():
    # one local epoch, full batch, sgd on both sides, dyadic values:
    # averaging updated weights must equal stepping on averaged gradients
    # down to the last bit for two rounds
    shards = dyadic_shards()
    kw = dict(task="regression", model="cond_linear", clusters=1,
              peers_per_cluster=4, n_per_client=4, features=2, rounds=2,
              local_epochs=1, batch_size=4, lr=2.0 ** -9, wd=0.0, seed=99,
              local_optimizer="sgd", server_optimizer="sgd")
    ra = run(FederationConfig(aggregation="fedavg", **kw),
             shards=[s for s in shards])
    rb = run(FederationConfig(aggregation="fedsgd", **kw),
             shards=[s for s in shards])
    assert np.array_equal(ra.params.value, rb.params.value)
    assert ra.params.value.tobytes() == rb.params.value.tobytes()


def test_fedsgd_close_to_fedavg_generic():
    kw = dict(clusters=2, peers_per_cluster=3, n_per_client=20, features=3,
              rounds=3, local_epochs=1, batch_size=20, lr=0.01, wd=0.0,
              seed=11, local_optimizer="sgd", server_optimizer="sgd",
              stats_recipe=CrossCovariance())
    ra = run(FederationConfig(aggregation="fedavg", **kw))
    rb = run(FederationConfig(aggregation="fedsgd", **kw))
    scale = max(1.0, np.max(np.abs(ra.params.value)))
    assert np.max(np.abs(ra.params.value - rb.params.value)) / scale < 1e-12


# ---------------------------------------------------------------- determinism


def test_run_byte_deterministic():
    a = run(small_cfg())
    b = run(small_cfg())
    assert a.params.value.tobytes() == b.params.value.tobytes()
    assert a.final_report.global_mean == b.final_report.global_mean


def test_threaded_run_matches_serial(monkeypatch):
    monkeypatch.delenv("FEDSTAT_THREADS", raising=False)
    serial = run(small_cfg(rounds=4))
    monkeypatch.setenv("FEDSTAT_THREADS", "4")
    threaded = run(small_cfg(rounds=4))
    assert serial.params.value.tobytes() == threaded.params.value.tobytes()


def test_minibatch_shuffles_differ_by_round():
    # distinct round indices give distinct batch orders but identical
    # reruns; verified through end-to-end determinism with batching on
    cfg = small_cfg(batch_size=10, rounds=2, local_epochs=2)
    a = run(cfg)
    b = run(cfg)
    assert a.params.value.tobytes() == b.params.value.tobytes()


# ---------------------------------------------------------------- training loop


def test_single_client_matches_plain_adamw():
    # one client, fedavg: the loop must reduce to ordinary AdamW training
    # restarted with clean optimizer state at every round boundary
    cfg = small_cfg(clusters=1, peers_per_cluster=1, rounds=5,
                    local_optimizer="adamw", wd=1e-3)
    res = run(cfg)

    shards = build_federation(cfg)
    prepare(shards, CrossCovariance())
    s = shards[0]
    mu = s.stats.mu
    W = np.zeros((s.X_train.shape[1], mu.shape[0]))
    ps = ParamSet([("W", W)])
    for _ in range(cfg.rounds):
        ps = ParamSet([("W", ps.param("W").copy())])  # clean m/v/step
        _, dW = grad_cond_linear(ps.param("W"), s.X_train, s.y_train, mu)
        ps.set_grad("W", dW)
        adamw_step(ps, lr=cfg.lr, wd=cfg.wd)
    assert res.params.value.tobytes() == ps.value.tobytes()


def test_client_optimizer_state_fresh_each_round():
    # a round starts from the merged values only; carrying Adam moments
    # across rounds would give a different trajectory
    cfg = small_cfg(clusters=1, peers_per_cluster=1, rounds=4,
                    local_optimizer="adamw", wd=1e-3)
    res = run(cfg)

    shards = build_federation(cfg)
    prepare(shards, CrossCovariance())
    s = shards[0]
    mu = s.stats.mu
    W = np.zeros((s.X_train.shape[1], mu.shape[0]))
    carried = ParamSet([("W", W.copy())])
    for _ in range(cfg.rounds):
        _, dW = grad_cond_linear(carried.param("W"), s.X_train, s.y_train, mu)
        carried.set_grad("W", dW)
        adamw_step(carried, lr=cfg.lr, wd=cfg.wd)
    assert res.params.value.tobytes() != carried.value.tobytes()


def test_rounds_zero_evaluates_initial_params():
    res = run(small_cfg(rounds=0))
    assert len(res.reports) == 1
    assert res.reports[0].round == -1
    assert np.all(res.params.value == 0.0)  # cond_linear inits at zero


def test_round_report_rollups_consistent():
    res = run(small_cfg(rounds=2))
    rep = res.final_report
    assert rep.metric == "rmse"
    assert rep.client_ids == [0, 1, 2, 3]
    assert rep.per_client_metric.shape == (4,)
    # cluster means recompute from the per-client block
    for c, mean in zip(rep.cluster_ids, rep.per_cluster_mean):
        members = [v for cid, v in zip([0, 0, 1, 1], rep.per_client_metric)
                   if cid == c]
        assert abs(mean - np.mean(members)) < 1e-12
    assert abs(rep.global_mean - rep.per_client_metric.mean()) < 1e-12


def test_history_records_every_round():
    res = run(small_cfg(rounds=4))
    assert [h.round for h in res.history] == [0, 1, 2, 3]
    assert all(np.isfinite(h.mean_loss) for h in res.history)


def test_eval_every_inserts_reports():
    res = run(small_cfg(rounds=4, eval_every=2))
    assert [r.round for r in res.reports] == [1, 3]


def test_nan_abort_names_round_and_client():
    cfg = small_cfg(clusters=1, peers_per_cluster=2, rounds=60,
                    local_optimizer="sgd", lr=1e18, wd=0.0)
    with pytest.raises(NumericError, match=r"round \d+, client \d+"):
        with np.errstate(all="ignore"):
            run(cfg)


# ---------------------------------------------------------------- baselines


def test_baseline_models_bypass_round_loop():
    for model in ("baseline_global", "baseline_cluster", "baseline_client"):
        res = run(small_cfg(model=model, n_per_client=50, batch_size=25))
        assert res.aggregation == "none"
        assert res.history == []
        assert isinstance(res.params, dict)
        assert len(res.reports) == 1


def test_baseline_cluster_beats_global_on_synthetic():
    cfg_kw = dict(clusters=3, peers_per_cluster=4, n_per_client=100,
                  features=10, rounds=1, batch_size=100, seed=5)
    g = run(small_cfg(model="baseline_global", **cfg_kw))
    c = run(small_cfg(model="baseline_cluster", **cfg_kw))
    assert c.final_report.global_mean < g.final_report.global_mean


# ---------------------------------------------------------------- classification


def test_classification_metric_is_accuracy():
    cfg = small_cfg(task="classification", rounds=2, n_per_client=40,
                    batch_size=40)
    res = run(cfg)
    rep = res.final_report
    assert rep.metric == "accuracy"
    assert np.all(rep.per_client_metric >= 0.0)
    assert np.all(rep.per_client_metric <= 1.0)
