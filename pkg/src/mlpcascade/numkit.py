"""Dense/sparse numeric kernels with hand-derived gradients.

Everything operates on plain numpy arrays (dense, row-major) and scipy CSR
matrices; there is no autodiff anywhere in the package. Loss functions return
a :class:`GradPair` carrying the scalar value and analytic gradients keyed by
parameter name, and every gradient formula is validated against
:func:`finite_diff_check` in the test suite.

float32 is the working precision for training; `finite_diff_check` insists on
float64 arrays because central differences drown in float32 rounding noise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse

# Type aliases for the two matrix representations used throughout.
DenseMatrix = np.ndarray
SparseMatrix = sparse.csr_array

DEFAULT_DTYPE = np.float32

# Denominator floor for relative-error comparisons (avoids 0/0).
REL_ERR_FLOOR = 1e-8


@dataclass
class GradPair:
    """Scalar loss value plus gradients keyed by parameter identifier.

    Every gradient array has the same shape (and dtype) as the tensor it
    differentiates with respect to.
    """

    value: float
    grads: dict[str, np.ndarray]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense matrix product with explicit shape validation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def spmm(s: SparseMatrix, d: np.ndarray) -> np.ndarray:
    """Sparse (CSR) times dense product; agrees with the densified matmul."""
    if d.ndim != 2:
        raise ValueError(f"spmm expects a 2-D dense operand, got {d.shape}")
    if s.shape[1] != d.shape[0]:
        raise ValueError(f"spmm shape mismatch: {s.shape} x {d.shape}")
    return s @ d


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def dropout_mask(rng: np.random.Generator, shape, rate: float, dtype) -> np.ndarray:
    """Inverted-dropout mask: zeros w.p. `rate`, survivors scaled by 1/(1-rate).

    Scaling at train time keeps eval forward passes mask-free.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    """Fan-based uniform init U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stabilized by max subtraction (never -inf)."""
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction.

    Rows sum to 1 within rounding for any finite input, and the result is
    invariant under adding a per-row constant to the logits.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_index(mask) -> np.ndarray:
    return np.asarray(mask, dtype=np.intp).ravel()


def masked_cross_entropy(logits: np.ndarray, onehot: np.ndarray, mask) -> GradPair:
    """Mean cross entropy over the rows named by `mask`.

    value = (1/|mask|) * sum_i -log softmax(logits[i])[class(i)]

    The gradient w.r.t. the logits is (softmax - onehot)/|mask| on masked
    rows and zero elsewhere. Soft label rows (summing to 1) are supported;
    the mixup loss relies on that.
    """
    if logits.shape != onehot.shape:
        raise ValueError(
            f"logits shape {logits.shape} != labels shape {onehot.shape}"
        )
    idx = _as_index(mask)
    if idx.size == 0:
        raise ValueError("masked_cross_entropy: empty mask")
    sub_logits = logits[idx]
    logp = log_softmax_rows(sub_logits)
    sub_onehot = onehot[idx]
    value = float(-(sub_onehot * logp).sum() / idx.size)
    grad = np.zeros_like(logits)
    grad[idx] = (softmax_rows(sub_logits) - sub_onehot) / idx.size
    return GradPair(value, {"logits": grad})


def kl_divergence(teacher_probs: np.ndarray, student_logits: np.ndarray, mask) -> GradPair:
    """Mean KL(teacher || softmax(student)) over the rows named by `mask`.

    The teacher distribution is a constant: no gradient flows to it. The
    gradient w.r.t. the student logits is (softmax(student) - teacher)/|mask|
    on masked rows. Value is >= 0 up to rounding (Gibbs inequality).
    """
    if teacher_probs.shape != student_logits.shape:
        raise ValueError(
            f"teacher shape {teacher_probs.shape} != student shape {student_logits.shape}"
        )
    idx = _as_index(mask)
    if idx.size == 0:
        raise ValueError("kl_divergence: empty mask")
    t = teacher_probs[idx]
    row_sums = t.sum(axis=1)
    bad = np.abs(row_sums - 1.0) > 1e-5
    if np.any(bad):
        row = int(idx[np.argmax(bad)])
        raise ValueError(
            f"kl_divergence: teacher row {row} sums to {float(row_sums[np.argmax(bad)]):.8g}, not 1"
        )
    if np.any(t < 0):
        row = int(idx[np.argmax((t < 0).any(axis=1))])
        raise ValueError(f"kl_divergence: teacher row {row} has negative entries")
    logp = log_softmax_rows(student_logits[idx])
    # t*ln(t) with the 0*ln(0) = 0 limit
    t_log_t = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
    value = float((t_log_t - t * logp).sum() / idx.size)
    grad = np.zeros_like(student_logits)
    grad[idx] = (softmax_rows(student_logits[idx]) - t) / idx.size
    return GradPair(value, {"logits": grad})


def finite_diff_check(
    loss_fn: Callable[[dict[str, np.ndarray]], GradPair],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Max elementwise relative error between analytic and central-difference
    gradients of `loss_fn` over every entry of every parameter.

    `loss_fn(params)` must be a pure function of the (float64) parameter
    arrays and return a GradPair covering every key in `params`. Probing
    perturbs entries in place and restores them afterwards.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    for name, arr in params.items():
        if arr.dtype != np.float64:
            raise ValueError(
                f"finite_diff_check requires float64 parameters; {name!r} is {arr.dtype}"
            )
    base = loss_fn(params)
    worst = 0.0
    for name, arr in params.items():
        analytic = base.grads[name]
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + epsilon
            up = loss_fn(params).value
            arr.flat[i] = orig - epsilon
            down = loss_fn(params).value
            arr.flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(
                    f"non-finite loss while probing parameter {name!r} entry {i}"
                )
            fd = (up - down) / (2.0 * epsilon)
            an = float(analytic.flat[i])
            denom = max(abs(fd), abs(an), REL_ERR_FLOOR)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def fingerprint(*arrays: np.ndarray) -> str:
    """SHA-256 hex digest over dtype, shape, and raw bytes of the arrays."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
