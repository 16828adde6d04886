"""Dense fp64 kernels with a reproducible accumulation mode.

Everything in this package runs through these few primitives so that the
determinism contract lives in exactly one place.  Two matmul modes exist:

* deterministic (default): every output element accumulates its products
  left-to-right over the contraction axis.  Bit-identical across runs and
  machines, and bit-identical to a naive triple loop.
* relaxed: plain BLAS matmul.  Still reproducible run-to-run on one machine
  (fixed kernel, fixed threading) but the accumulation order is
  implementation-defined.  Enable with ``IDEA_PRUNE_DETERMINISTIC=0`` or
  :func:`set_deterministic` when throughput matters more than portable
  bit-exactness.
"""

from __future__ import annotations

import os
from typing import Callable

import numpy as np

DETERMINISTIC_ENV = "IDEA_PRUNE_DETERMINISTIC"

_deterministic = os.environ.get(DETERMINISTIC_ENV, "1") != "0"


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class OracleError(RuntimeError):
    """A test oracle hit a non-finite or otherwise unusable evaluation."""


class NonFiniteError(FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""


def set_deterministic(on: bool) -> None:
    """Switch between ordered-accumulation and BLAS matmul globally."""
    global _deterministic
    _deterministic = bool(on)


def deterministic_enabled() -> bool:
    return _deterministic


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with exact shape checking and no broadcasting.

    Accepts 2-d operands or stacked operands with identical leading
    dimensions, i.e. ``(..., m, k) @ (..., k, n)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if _deterministic:
        return _matmul_ordered(a, b)
    return np.matmul(a, b)


def _matmul_ordered(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Each output element starts at 0.0 and adds a[..,i,k]*b[..,k,j] for
    # k = 0,1,2,...  -- the same float ops in the same order as a triple loop.
    k = a.shape[-1]
    out = np.zeros(a.shape[:-1] + (b.shape[-1],), dtype=np.float64)
    tmp = np.empty_like(out)
    for i in range(k):
        np.multiply(a[..., :, i : i + 1], b[..., i : i + 1, :], out=tmp)
        out += tmp
    return out


try:
    from scipy.special import expit as _expit
except ImportError:  # pragma: no cover
    _expit = None


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if _expit is not None:
        return _expit(z)
    e = np.exp(-np.abs(z))  # never overflows
    num = np.where(z >= 0.0, 1.0, e)
    e += 1.0
    num /= e
    return num


def silu(z: np.ndarray) -> np.ndarray:
    """Elementwise z * sigmoid(z)."""
    z = np.asarray(z, dtype=np.float64)
    return z * sigmoid(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    """d/dz silu(z) = sigmoid(z) * (1 + z * (1 - sigmoid(z)))."""
    z = np.asarray(z, dtype=np.float64)
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=-1, keepdims=True)
    e = np.exp(a - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def finite_difference_grad(
    loss_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient oracle: (L(x+h*e_i) - L(x-h*e_i)) / 2h.

    ``loss_fn`` must be pure and deterministic; it is handed the same array
    object with one perturbed entry per evaluation.
    """
    if h <= 0.0:
        raise ValueError(f"step size must be positive, got {h}")
    theta = np.array(params, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lo_hi = float(loss_fn(theta))
        flat[i] = orig - h
        lo_lo = float(loss_fn(theta))
        flat[i] = orig
        if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
            raise OracleError(
                f"non-finite loss at parameter index {i}: {lo_hi!r}, {lo_lo!r}"
            )
        gflat[i] = (lo_hi - lo_lo) / (2.0 * h)
    return grad


def require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
