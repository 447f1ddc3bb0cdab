"""Dense-array primitives shared by every other module.

All arithmetic is carried out on row-major ``numpy.ndarray`` objects in
64-bit floating point (the dtype of the input is kept when it is wider,
which lets the gradient checker run the same code in extended precision).
Zero-norm vectors are treated as errors rather than silently producing NaN.
"""

from __future__ import annotations

import numpy as np


class NumericsError(ValueError):
    """Raised for inputs that would otherwise produce non-finite results."""


def as_tensor(x, *, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float array and validate it.

    Integer and float32 inputs are promoted to float64; float64 and
    longdouble inputs keep their dtype.
    """
    arr = np.asarray(x)
    if arr.dtype.kind != "f" or arr.dtype.itemsize < 8:
        arr = arr.astype(np.float64)
    arr = np.ascontiguousarray(arr)
    if ndim is not None and arr.ndim != ndim:
        raise NumericsError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} contains non-finite values")
    return arr


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm along ``axis``.

    Works on a single vector or on a stack of row vectors.

    Raises:
        NumericsError: if ``v`` is empty or any slice has zero norm.
    """
    v = as_tensor(v, name="v")
    if v.size == 0:
        raise NumericsError("cannot normalize an empty vector")
    norms = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    if np.any(norms == 0):
        raise NumericsError("cannot normalize a zero-norm vector")
    return v / norms


def scaled_cosine(q, p, tau: float) -> float:
    """Temperature-scaled cosine similarity ``cos(q, p) / tau``."""
    if not tau > 0:
        raise NumericsError(f"tau must be positive, got {tau}")
    q = as_tensor(q, ndim=1, name="q")
    p = as_tensor(p, ndim=1, name="p")
    if q.shape != p.shape:
        raise NumericsError(f"dimension mismatch: {q.shape} vs {p.shape}")
    cos = float(np.dot(l2_normalize(q), l2_normalize(p)))
    # rounding can push |cos| a hair past 1
    cos = min(1.0, max(-1.0, cos))
    return cos / tau


def logsumexp(row, axis: int = -1):
    """Max-shifted ``log(sum(exp(row)))``.

    Exact for single-element rows: the shifted exponential is ``exp(0) == 1``
    and ``log(1) == 0``. Entries equal to ``-inf`` are allowed and contribute
    nothing, as long as each reduced slice holds at least one finite value.
    """
    x = np.asarray(row)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise NumericsError("logsumexp of an empty row")
    m = np.max(x, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericsError("logsumexp needs at least one finite entry per row")
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    out = np.squeeze(out, axis=axis)
    return out[()] if out.ndim == 0 else out


def row_softmax(scores, temperature: float = 1.0) -> np.ndarray:
    """Softmax of each row of ``scores / temperature``."""
    if not temperature > 0:
        raise NumericsError(f"temperature must be positive, got {temperature}")
    s = as_tensor(scores, name="scores")
    if s.ndim == 1:
        s = s[None, :]
    z = s / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_row_softmax(scores, temperature: float = 1.0) -> np.ndarray:
    """Row-wise log-softmax of ``scores / temperature``, computed stably."""
    if not temperature > 0:
        raise NumericsError(f"temperature must be positive, got {temperature}")
    s = as_tensor(scores, name="scores")
    if s.ndim == 1:
        s = s[None, :]
    z = s / temperature
    return z - logsumexp(z, axis=-1)[..., None]
