"""Federated learning simulator where models condition on per-client
statistics computed locally and never shared.

Modules:
  numerics    flat parameter sets, losses, AdamW, finite differences
  stats       moments, cross-covariance, Jacobi PCA, per-client stats
  synthdata   counter-based RNG and the clustered synthetic federation
  models      conditional model families, OLS, reference baselines
  federation  the three-stage protocol: prepare, rounds, evaluate
  emnist      IDX parsing, group partitioning, the conditional CNN
  cli         batch experiment driver emitting CSV tables
"""

__version__ = "0.1.0"

from .numerics import (
    NumericError,
    ParamSet,
    ShapeError,
    adamw_step,
    bce_loss,
    finite_diff_grad,
    mse_loss,
    sgd_step,
    sigmoid,
    softmax,
)
from .stats import (
    CrossCovariance,
    DummyGlobalPC,
    DummyZeros,
    LocalStats,
    Moments,
    PrincipalComponents,
    client_stats,
    covariance_matrix,
    cross_covariance,
    jacobi_eigh,
    principal_components,
)
from .synthdata import (
    ClientShard,
    ClusterSpec,
    SeededRng,
    build_federation,
    derive_stream,
    gen_client_shard,
    gen_cluster_thetas,
)
from .models import (
    fit_baseline,
    fit_ols,
    gaussian_solve,
    grad_cond_linear,
    grad_ensemble,
    grad_mlp,
    predict_cond_linear,
    predict_ensemble,
    predict_mlp,
    stationarity_residual,
)
from .federation import (
    FederationConfig,
    RoundReport,
    RunResult,
    aggregate_fedavg,
    aggregate_fedsgd,
    evaluate,
    local_update,
    prepare,
    run,
)

__all__ = [name for name in dir() if not name.startswith("_")]
