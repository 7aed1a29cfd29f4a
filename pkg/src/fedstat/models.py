"""Conditional model families, their analytic gradients, and the
unconditional reference fits.

All three conditional families share one contract: the client's stats
vector mu enters as a constant input (no gradient flows into it), the
scalar output is a regression value or, for the classifier variants, a
logit consumed by the cross-entropy loss.

The closed-form check from the appendix-style analysis lives here too:
with W = I and mu_i set to each client's own least-squares coefficients,
the summed loss differential w.r.t. W vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    NumericError,
    ParamSet,
    ShapeError,
    bce_loss,
    matmul,
    mse_loss,
    relu,
    sigmoid,
    softmax,
)

__all__ = [
    "predict_cond_linear",
    "cond_linear_batch",
    "grad_cond_linear",
    "predict_ensemble",
    "ensemble_batch",
    "grad_ensemble",
    "predict_mlp",
    "mlp_batch",
    "grad_mlp",
    "classifier_probability",
    "gaussian_solve",
    "fit_ols",
    "BaselineParams",
    "fit_baseline",
    "stationarity_residual",
    "ModelAdapter",
    "CondLinearAdapter",
    "EnsembleAdapter",
    "MlpAdapter",
    "adapter_for",
]


# --- conditional linear: y = x^T W mu -------------------------------------

def predict_cond_linear(W: np.ndarray, x: np.ndarray, mu: np.ndarray) -> float:
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if W.shape != (x.shape[0], mu.shape[0]):
        raise ShapeError(f"W shape {W.shape} does not match x {x.shape} and mu {mu.shape}")
    return float(x @ (W @ mu))


def cond_linear_batch(W: np.ndarray, X: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return X @ (W @ mu)


def grad_cond_linear(W, X, y, mu, task: str = "regression"):
    """Batch loss and exact dW; mu is treated as a constant input.

    dW = X^T dL/dpred mu^T, with dL/dpred from the MSE or logit BCE loss.
    """
    X = np.asarray(X, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if W.shape != (X.shape[1], mu.shape[0]):
        raise ShapeError(f"W shape {W.shape} does not match X {X.shape} and mu {mu.shape}")
    pred = X @ (W @ mu)
    loss, dpred = _output_loss(pred, y, task)
    dW = np.outer(X.T @ dpred, mu)
    return loss, dW


# --- ensemble: y = (x^T W_v) softmax(mu^T W_u) -----------------------------

def predict_ensemble(W_u: np.ndarray, W_v: np.ndarray, x: np.ndarray,
                     mu: np.ndarray) -> float:
    gates = softmax(np.asarray(mu, dtype=np.float64) @ W_u)
    return float((np.asarray(x, dtype=np.float64) @ W_v) @ gates)


def ensemble_batch(W_u, W_v, X, mu) -> np.ndarray:
    return (X @ W_v) @ softmax(mu @ W_u)


def grad_ensemble(W_u, W_v, X, y, mu, task: str = "regression"):
    """Loss plus exact gradients through the softmax gate.

    The gate depends only on mu, so it is one softmax per batch; experts
    see the usual weighted residual.
    """
    X = np.asarray(X, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if W_u.shape[0] != mu.shape[0] or W_v.shape[0] != X.shape[1] \
            or W_u.shape[1] != W_v.shape[1]:
        raise ShapeError(
            f"ensemble shapes do not chain: W_u {W_u.shape}, W_v {W_v.shape}, "
            f"X {X.shape}, mu {mu.shape}")
    s = softmax(mu @ W_u)
    V = X @ W_v
    pred = V @ s
    loss, dpred = _output_loss(pred, y, task)
    dW_v = X.T @ (dpred[:, None] * s[None, :])
    ds = V.T @ dpred
    du = s * (ds - float(s @ ds))
    dW_u = np.outer(mu, du)
    return loss, dW_u, dW_v


# --- MLP on [x | mu] --------------------------------------------------------

def predict_mlp(layers, x, mu) -> float:
    z = np.concatenate([np.asarray(x, dtype=np.float64),
                        np.asarray(mu, dtype=np.float64)])
    return float(mlp_batch(layers, z[None, :], None)[0])


def mlp_batch(layers, Z, mu) -> np.ndarray:
    """Forward pass; Z is the pre-concatenated input if mu is None."""
    a = Z if mu is None else np.hstack([Z, np.tile(mu, (Z.shape[0], 1))])
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        a = a @ W + b
        if i != last:
            a = relu(a)
    return a[:, 0]


def grad_mlp(layers, X, y, mu, task: str = "regression"):
    """Backprop through relu hidden layers and a linear scalar output."""
    Z = np.hstack([np.asarray(X, dtype=np.float64),
                   np.tile(np.asarray(mu, dtype=np.float64), (X.shape[0], 1))])
    if layers[0][0].shape[0] != Z.shape[1]:
        raise ShapeError(
            f"mlp input width {layers[0][0].shape[0]} != x+mu width {Z.shape[1]}")
    acts = [Z]
    a = Z
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        a = a @ W + b
        if i != last:
            a = relu(a)
        acts.append(a)
    pred = acts[-1][:, 0]
    loss, dpred = _output_loss(pred, y, task)
    grads = [None] * len(layers)
    da = dpred[:, None]
    for i in range(last, -1, -1):
        W, _ = layers[i]
        if i != last:
            da = da * (acts[i + 1] > 0)
        grads[i] = (acts[i].T @ da, da.sum(axis=0))
        if i > 0:
            da = da @ W.T
    return loss, grads


def classifier_probability(logit) -> np.ndarray:
    """Binary-classifier variant: sigmoid of the model's scalar output."""
    return sigmoid(logit)


def _output_loss(pred, y, task):
    if task == "regression":
        return mse_loss(pred, y)
    if task == "classification":
        return bce_loss(pred, y)
    raise ValueError(f"unknown task {task!r}")


# --- ordinary least squares -------------------------------------------------

def gaussian_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b by Gaussian elimination with partial pivoting."""
    A = np.array(A, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or b.shape != (n,):
        raise ShapeError(f"gaussian_solve shapes: A {A.shape}, b {b.shape}")
    scale = np.abs(A).max(initial=0.0)
    tiny = n * np.finfo(np.float64).eps * max(scale, 1.0)
    for col in range(n):
        piv = col + int(np.argmax(np.abs(A[col:, col])))
        if abs(A[piv, col]) <= tiny:
            raise NumericError(
                f"singular system: pivot {col} has magnitude {abs(A[piv, col]):.3e}")
        if piv != col:
            A[[col, piv]] = A[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        factors = A[col + 1:, col] / A[col, col]
        A[col + 1:, col:] -= factors[:, None] * A[col, col:]
        b[col + 1:] -= factors * b[col]
    x = np.empty(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - A[row, row + 1:] @ x[row + 1:]) / A[row, row]
    return x


def fit_ols(X: np.ndarray, y: np.ndarray, ridge: float = 0.0,
            fallback_ridge: float = 1e-8) -> np.ndarray:
    """Least squares via the normal equations (X^T X + ridge I) b = X^T y.

    A singular system retries once with ``fallback_ridge`` before raising;
    pass fallback_ridge=0 to make singularity a hard error.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"fit_ols shapes: X {X.shape}, y {y.shape}")
    A = X.T @ X
    if ridge > 0.0:
        A = A + ridge * np.eye(X.shape[1])
    try:
        return gaussian_solve(A, X.T @ y)
    except NumericError:
        if fallback_ridge > max(ridge, 0.0):
            return gaussian_solve(X.T @ X + fallback_ridge * np.eye(X.shape[1]),
                                  X.T @ y)
        raise


# --- unconditional reference fits -------------------------------------------

@dataclass
class BaselineParams:
    beta: np.ndarray
    scope: tuple  # ("global",) | ("cluster", id) | ("client", id)


def _pool_rows(shards, scope):
    kind = scope[0]
    if kind == "global":
        selected = shards
    elif kind == "cluster":
        selected = [s for s in shards if s.cluster_id == scope[1]]
    elif kind == "client":
        selected = [s for s in shards if s.client_id == scope[1]]
    else:
        raise ValueError(f"unknown baseline scope {scope!r}")
    if not selected:
        raise ValueError(f"no shards match scope {scope!r}")
    X = np.vstack([s.X_train for s in selected])
    y = np.concatenate([s.y_train for s in selected])
    return X, y, selected[0].task


def fit_baseline(shards, scope, steps: int = 2000, lr: float = 0.005,
                 wd: float = 0.001) -> BaselineParams:
    """Fit x^T beta on the rows the scope may see.

    Regression has the closed form; the logistic variant has none, so it
    trains full-batch with AdamW on the same step budget the conditional
    models get.
    """
    X, y, task = _pool_rows(shards, scope)
    if task == "regression":
        return BaselineParams(fit_ols(X, y), tuple(scope))
    from .numerics import adamw_step  # local import keeps module load light

    ps = ParamSet([("beta", np.zeros(X.shape[1]))])
    for _ in range(steps):
        _, dlogit = bce_loss(X @ ps.param("beta"), y)
        ps.set_grad("beta", X.T @ dlogit)
        adamw_step(ps, lr=lr, wd=wd)
    return BaselineParams(ps.param("beta").copy(), tuple(scope))


# --- appendix stationarity oracle --------------------------------------------

def stationarity_residual(shards, W: np.ndarray | None = None) -> float:
    """Max-norm of the summed loss differential dS/dW at the closed form.

    Sets mu_i to each client's exact least-squares coefficients; with the
    default W = I the per-client term X^T (X W mu - y) mu^T vanishes, so
    the residual certifies the stationary solution.  Rank-deficient
    shards raise (no ridge fallback here; the identity needs exact OLS).
    """
    width = shards[0].X_train.shape[1]
    if W is None:
        W = np.eye(width)
    total = np.zeros((width, W.shape[1]))
    for shard in sorted(shards, key=lambda s: s.client_id):
        X, y = shard.X_train, shard.y_train
        mu = fit_ols(X, y, ridge=0.0, fallback_ridge=0.0)
        resid = X @ (W @ mu) - y
        total += np.outer(X.T @ resid, mu)
    return float(np.abs(total).max())


# --- adapters used by the federation loop ------------------------------------

class ModelAdapter:
    """Uniform surface the round loop drives: init, loss+grad, predict."""

    name: str

    def init_params(self, x_width: int, mu_len: int, rng) -> ParamSet:
        raise NotImplementedError

    def loss_grad(self, ps: ParamSet, X, y, mu, task: str) -> float:
        """Compute batch loss and write gradients into ``ps``."""
        raise NotImplementedError

    def predict(self, ps: ParamSet, X, mu) -> np.ndarray:
        """Raw model output per row (regression value or logit)."""
        raise NotImplementedError

    def client_arrays(self, shard, train: bool = True):
        X = shard.X_train if train else shard.X_test
        y = shard.y_train if train else shard.y_test
        return X, y, shard.stats.mu


class CondLinearAdapter(ModelAdapter):
    name = "cond_linear"

    def init_params(self, x_width, mu_len, rng) -> ParamSet:
        # Zero start is fine: the per-client objective is quadratic in W.
        return ParamSet([("W", np.zeros((x_width, mu_len)))])

    def loss_grad(self, ps, X, y, mu, task):
        loss, dW = grad_cond_linear(ps.param("W"), X, y, mu, task)
        ps.set_grad("W", dW)
        return loss

    def predict(self, ps, X, mu):
        return cond_linear_batch(ps.param("W"), X, mu)


class EnsembleAdapter(ModelAdapter):
    name = "ensemble"

    def __init__(self, width: int = 8, init_scale: float = 2.0):
        if width < 2:
            raise ValueError("ensemble width must be >= 2")
        self.width = width
        self.init_scale = init_scale

    def init_params(self, x_width, mu_len, rng) -> ParamSet:
        # Experts must start well spread or the uniform gate never breaks
        # symmetry and the model collapses to the global baseline; the
        # gate gradient scales with the variance of expert predictions.
        W_v = self.init_scale * rng.standard_normal((x_width, self.width))
        return ParamSet([("W_u", np.zeros((mu_len, self.width))), ("W_v", W_v)])

    def loss_grad(self, ps, X, y, mu, task):
        loss, dW_u, dW_v = grad_ensemble(ps.param("W_u"), ps.param("W_v"),
                                         X, y, mu, task)
        ps.set_grad("W_u", dW_u)
        ps.set_grad("W_v", dW_v)
        return loss

    def predict(self, ps, X, mu):
        return ensemble_batch(ps.param("W_u"), ps.param("W_v"), X, mu)


class MlpAdapter(ModelAdapter):
    name = "mlp"

    def __init__(self, hidden=(64, 64)):
        self.hidden = tuple(hidden)

    def init_params(self, x_width, mu_len, rng) -> ParamSet:
        widths = [x_width + mu_len, *self.hidden, 1]
        entries = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            W = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            entries.append((f"w{i}", W))
            entries.append((f"b{i}", np.zeros(fan_out)))
        return ParamSet(entries)

    def _layers(self, ps):
        n = len(self.hidden) + 1
        return [(ps.param(f"w{i}"), ps.param(f"b{i}")) for i in range(n)]

    def loss_grad(self, ps, X, y, mu, task):
        loss, grads = grad_mlp(self._layers(ps), X, y, mu, task)
        for i, (dW, db) in enumerate(grads):
            ps.set_grad(f"w{i}", dW)
            ps.set_grad(f"b{i}", db)
        return loss

    def predict(self, ps, X, mu):
        return mlp_batch(self._layers(ps), X, mu)


def adapter_for(model: str, config=None) -> ModelAdapter:
    """Build the adapter for a config's conditional model name."""
    if model == "cond_linear":
        return CondLinearAdapter()
    if model == "ensemble":
        width = getattr(config, "ensemble_width", 8) if config else 8
        return EnsembleAdapter(width=width)
    if model == "mlp":
        hidden = getattr(config, "mlp_hidden", (64, 64)) if config else (64, 64)
        return MlpAdapter(hidden=hidden)
    raise ValueError(f"no adapter for model {model!r}")
