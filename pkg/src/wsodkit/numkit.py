"""Dense float64 building blocks: affine maps, softmaxes, SGD, grad checking.

Every differentiable operation is an explicit forward/backward pair; callers
compose them in a fixed order and accumulate into ``Param.grad``. There is no
tape. All arrays are plain numpy float64.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from wsodkit.errors import (
    CheckpointError,
    GradCheckError,
    OptimizerError,
    ShapeError,
)

# Probabilities are clamped to [LOG_EPS, 1 - LOG_EPS] before any log.
LOG_EPS = 1e-7


class Param:
    """A named value/grad pair updated in place by the optimizer."""

    def __init__(self, name: str, value) -> None:
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise affine map ``x @ w + b`` with shape checking."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError("affine expects x (n,d), w (d,m), b (m,)")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(
            f"affine shapes do not conform: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    return x @ w + b


def affine_backward(
    x: np.ndarray, w: np.ndarray, g: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``x @ w + b`` given upstream ``g``; returns (dx, dw, db)."""
    return g @ w.T, x.T @ g, g.sum(axis=0)


def softmax_cols(s: np.ndarray) -> np.ndarray:
    """Softmax down each column (axis 0); every column sums to 1.

    The column max is subtracted before exponentiation so large scores
    cannot overflow.
    """
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(s - s.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_rows(s: np.ndarray) -> np.ndarray:
    """Softmax along each row (axis 1); every row sums to 1."""
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_cols_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    # ds = y * (g - <g, y>_col), the softmax Jacobian applied columnwise.
    return y * (g - (g * y).sum(axis=0, keepdims=True))


def softmax_rows_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp_unit(p: np.ndarray) -> np.ndarray:
    """Clamp probabilities into [LOG_EPS, 1 - LOG_EPS]."""
    return np.clip(p, LOG_EPS, 1.0 - LOG_EPS)


def log_clamped(p: np.ndarray) -> np.ndarray:
    return np.log(clamp_unit(p))


def dlog_clamped(p: np.ndarray) -> np.ndarray:
    """d/dp of log_clamped: 1/p inside the clamp window, 0 where it binds."""
    p = np.asarray(p, dtype=np.float64)
    inside = (p > LOG_EPS) & (p < 1.0 - LOG_EPS)
    safe = np.where(inside, p, 1.0)
    return np.where(inside, 1.0 / safe, 0.0)


class SGD:
    """Momentum SGD over a fixed parameter list.

    Each step applies ``v <- momentum * v - lr * grad; value <- value + v``
    and zeroes the gradients. Non-finite gradients abort the step.
    """

    def __init__(
        self, params: Sequence[Param], lr: float, momentum: float = 0.0
    ) -> None:
        if not np.isfinite(lr) or lr <= 0.0:
            raise OptimizerError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise OptimizerError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise OptimizerError(f"non-finite gradient for parameter {p.name!r}")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v -= self.lr * p.grad
            p.value += v
            p.grad[...] = 0.0


def grad_check(
    f: Callable[[], float], params: Sequence[Param], eps: float = 1e-5
) -> float:
    """Compare analytic gradients against central differences.

    ``f`` must zero the grads of ``params``, run forward + backward, and
    return the scalar loss. Returns the worst relative error
    ``|a - n| / max(1, |a|, |n|)`` over every coordinate. Leaves parameter
    values untouched; grads are left at whatever the last call produced.
    """
    if eps <= 0.0:
        raise GradCheckError(f"eps must be positive, got {eps}")
    loss = float(f())
    if not np.isfinite(loss):
        raise GradCheckError("loss is non-finite at the evaluation point")
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat_v = p.value.reshape(-1)
        flat_a = a.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + eps
            lp = float(f())
            flat_v[i] = orig - eps
            lm = float(f())
            flat_v[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise GradCheckError(
                    f"loss became non-finite while perturbing {p.name!r}"
                )
            num = (lp - lm) / (2.0 * eps)
            ana = flat_a[i]
            rel = abs(ana - num) / max(1.0, abs(ana), abs(num))
            if rel > worst:
                worst = rel
    return worst


def _format_float(v: float) -> str:
    return format(float(v), ".17g")


def save_checkpoint(params: Iterable[Param], path: str | Path) -> None:
    """Write parameters as JSON name -> {shape, values}, row-major.

    Floats are rendered with 17 significant digits so the file is
    byte-stable and round-trips float64 exactly.
    """
    parts = []
    for p in params:
        shape = ",".join(str(int(d)) for d in p.value.shape)
        values = ",".join(_format_float(v) for v in p.value.reshape(-1))
        parts.append(f'"{p.name}":{{"shape":[{shape}],"values":[{values}]}}')
    Path(path).write_text("{" + ",".join(parts) + "}\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by save_checkpoint."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from e
    if not isinstance(obj, dict):
        raise CheckpointError(f"checkpoint {path} is not a JSON object")
    out: dict[str, np.ndarray] = {}
    for name, entry in obj.items():
        try:
            shape = tuple(int(d) for d in entry["shape"])
            values = np.array(entry["values"], dtype=np.float64)
        except (TypeError, KeyError, ValueError) as e:
            raise CheckpointError(f"bad entry {name!r} in checkpoint {path}") from e
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(
                f"entry {name!r} has {values.size} values for shape {shape}"
            )
        out[name] = values.reshape(shape)
    return out
