"""Dense float64 numerics shared by every model in the package.

Plain numpy arrays are the tensor carrier: matrices are C-ordered 2-d
float64 arrays, vectors are 1-d.  Trainable weights live in
:class:`ParamSet`, which backs all named tensors (values, gradients and
AdamW moment buffers) with flat contiguous arrays so one optimizer step
is a handful of vectorized operations regardless of how many named
parameters a model has.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "tensor2",
    "ensure_finite",
    "matmul",
    "softmax",
    "sigmoid",
    "relu",
    "mse_loss",
    "bce_loss",
    "ParamSet",
    "adamw_step",
    "sgd_step",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Operand shapes do not chain."""


class NumericError(RuntimeError):
    """Non-finite values or a numerically degenerate system."""


def tensor2(data) -> np.ndarray:
    """Coerce to a C-ordered float64 matrix and verify it is finite."""
    a = np.ascontiguousarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got ndim={a.ndim}")
    ensure_finite(a, "tensor2 input")
    return a


def ensure_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs matrices, got ndim {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a vector (max-subtraction)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(v - v.max())
    return e / e.sum()


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def relu(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0)
    return float(out) if out.ndim == 0 else out


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. pred: 2(pred-target)/n."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError(f"mse_loss needs equal non-empty vectors, got {pred.shape} vs {target.shape}")
    r = pred - target
    n = r.size
    return float(np.mean(r * r)), 2.0 * r / n


def bce_loss(logit: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy on logits, stable for large |logit|.

    Per element: max(z, 0) - z*t + log(1 + exp(-|z|)); the gradient is
    (sigmoid(z) - t) / n.
    """
    z = np.asarray(logit, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if z.shape != t.shape or z.size == 0:
        raise ValueError(f"bce_loss needs equal non-empty vectors, got {z.shape} vs {t.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce_loss targets must be 0 or 1")
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(loss)), (sigmoid(z) - t) / z.size


class ParamSet:
    """Ordered named parameter tensors with paired grad/Adam buffers.

    All four buffers (value, grad, first and second Adam moments) of all
    entries share one flat float64 array each; named access returns
    reshaped views into those arrays.  ``step`` is the shared optimizer
    step count.
    """

    def __init__(self, entries):
        names = []
        shapes = {}
        slices = {}
        offset = 0
        chunks = []
        for name, array in entries:
            a = np.asarray(array, dtype=np.float64)
            if name in shapes:
                raise ValueError(f"duplicate parameter name {name!r}")
            names.append(name)
            shapes[name] = a.shape
            slices[name] = slice(offset, offset + a.size)
            offset += a.size
            chunks.append(a.ravel())
        self._names = tuple(names)
        self._shapes = shapes
        self._slices = slices
        self.value = np.concatenate(chunks) if chunks else np.empty(0)
        self.grad = np.zeros(offset)
        self.adam_m = np.zeros(offset)
        self.adam_v = np.zeros(offset)
        self.step = 0

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def shape(self, name: str) -> tuple[int, ...]:
        return self._shapes[name]

    @property
    def size(self) -> int:
        return self.value.size

    def param(self, name: str) -> np.ndarray:
        """Writable view of one named value tensor."""
        return self.value[self._slices[name]].reshape(self._shapes[name])

    def grad_of(self, name: str) -> np.ndarray:
        return self.grad[self._slices[name]].reshape(self._shapes[name])

    def set_grad(self, name: str, g: np.ndarray) -> None:
        view = self.grad[self._slices[name]]
        view[:] = np.asarray(g, dtype=np.float64).ravel()

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def copy(self) -> "ParamSet":
        """Deep copy including gradients, Adam state and step count."""
        other = ParamSet([(n, self.param(n)) for n in self._names])
        other.grad[:] = self.grad
        other.adam_m[:] = self.adam_m
        other.adam_v[:] = self.adam_v
        other.step = self.step
        return other

    def export_opt_state(self) -> tuple[np.ndarray, np.ndarray, int]:
        return self.adam_m.copy(), self.adam_v.copy(), self.step

    def import_opt_state(self, state) -> None:
        m, v, step = state
        self.adam_m[:] = m
        self.adam_v[:] = v
        self.step = step

    def same_layout(self, other: "ParamSet") -> bool:
        return self._names == other._names and all(
            self._shapes[n] == other._shapes[n] for n in self._names
        )


def adamw_step(params: ParamSet, lr: float, wd: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One AdamW update from the gradients stored in ``params``.

    Decoupled weight decay multiplies values by (1 - lr*wd) before the
    adaptive update, so a zero-gradient step is exactly that scaling.
    """
    g = params.grad
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient in adamw_step")
    params.step += 1
    t = params.step
    m, v = params.adam_m, params.adam_v
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    if wd != 0.0:
        params.value *= 1.0 - lr * wd
    params.value -= lr * mhat / (np.sqrt(vhat) + eps)


def sgd_step(params: ParamSet, lr: float) -> None:
    """Plain gradient step, used by FedSGD-equivalence configurations."""
    g = params.grad
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient in sgd_step")
    params.step += 1
    params.value -= lr * g


def finite_diff_grad(f, params: ParamSet, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of a ParamSet.

    Perturbs one flat coordinate at a time; the ParamSet is restored
    exactly afterwards.  Returns one array per parameter name.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad needs h > 0")
    flat = np.empty(params.size)
    for i in range(params.size):
        orig = params.value[i]
        params.value[i] = orig + h
        fp = f(params)
        params.value[i] = orig - h
        fm = f(params)
        params.value[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return {n: flat[params._slices[n]].reshape(params.shape(n)).copy()
            for n in params.names}
