"""Why conditioning on local statistics helps: a small clustered desk.

Three clusters of clients share three different linear models.  A single
global fit has to average them and lands far from every cluster; a model
that reads each client's cross-covariance vector can route around the
heterogeneity without ever seeing another client's data.

Run:  python3 demos/clustered_regression.py
"""

import time

import numpy as np

from fedstat.federation import FederationConfig, run
from fedstat.models import stationarity_residual
from fedstat.synthdata import build_federation


def make_config(model, rounds=100):
    return FederationConfig(
        task="regression", model=model, clusters=3, peers_per_cluster=4,
        n_per_client=60, features=8, rounds=rounds, local_epochs=40,
        batch_size=60, lr=0.02, wd=0.001, seed=7)


def main():
    shards = build_federation(make_config("cond_linear"))
    print(f"{len(shards)} clients, 3 clusters, 60 points each\n")

    results = {}
    for model in ("baseline_global", "baseline_cluster", "baseline_client",
                  "cond_linear", "ensemble"):
        t0 = time.time()
        res = run(make_config(model), shards=shards)
        results[model] = res.final_report.global_mean
        print(f"  {model:>16}: test rmse {results[model]:8.4f}"
              f"   ({time.time() - t0:.1f}s)")

    print("\nThe ensemble sits near the clusterwise oracle and the other")
    print("conditional models stay well below the global fit, which pays the")
    print("full price of averaging three unrelated linear models.")

    # The closed form: with W = I and every client's mu set to its own
    # least-squares coefficients, the summed loss differential vanishes.
    resid = stationarity_residual(shards)
    W = np.eye(shards[0].X_train.shape[1])
    W[0, 0] += 0.1
    print(f"\nstationarity residual at the closed form: {resid:.2e}")
    print(f"same residual after nudging W:            "
          f"{stationarity_residual(shards, W):.2e}")


if __name__ == "__main__":
    main()
