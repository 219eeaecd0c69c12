"""Dense float64 primitives shared by every other module.

Matrices and vectors are plain ``numpy.ndarray`` objects (row-major, float64).
Functions that take a vector also accept a 2-D batch whose rows are
independent vectors; the last axis is always the feature axis.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) so a seed gives the same stream everywhere."""
    return np.random.Generator(np.random.Philox(int(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child generators; the parent's draw stream is not advanced."""
    return rng.spawn(n)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def as_vector(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ValueError(f"matmul expects a 2-D left operand, got shapes {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"matmul produced non-finite values for shapes {a.shape} x {b.shape}")
    return out


def softmax(v, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis`` (default: the last one)."""
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = v / temperature if temperature != 1.0 else v
    if z.ndim == 1 or (axis != -1 and axis != z.ndim - 1):
        z = z - z.max(axis=axis, keepdims=True)
        np.exp(z, out=z)
        z /= z.sum(axis=axis, keepdims=True)
        return z
    # reduce along a leading axis: numpy is far faster on contiguous rows than
    # on a short trailing axis
    t = z.reshape(-1, z.shape[-1]).T.copy()
    t -= t.max(axis=0)
    np.exp(t, out=t)
    t /= t.sum(axis=0)
    return np.ascontiguousarray(t.T).reshape(z.shape)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Pull a gradient on softmax outputs back to the logits (last axis)."""
    inner = np.sum(grad_p * p, axis=-1, keepdims=True)
    return p * (grad_p - inner) / temperature


def top_k_indices(v, k: int) -> np.ndarray:
    """Indices of the k largest entries, by descending value then ascending index.

    Works row-wise on a 2-D batch.
    """
    v = np.asarray(v, dtype=DTYPE)
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    # stable sort on the negation keeps lower indices first among ties
    return np.argsort(-v, axis=-1, kind="stable")[..., :k]


def init_zeros(rows: int, cols: int) -> np.ndarray:
    _check_dims(rows, cols)
    return np.zeros((rows, cols), dtype=DTYPE)


def init_kaiming(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. normal entries with variance 2 / cols (fan-in)."""
    _check_dims(rows, cols)
    return rng.standard_normal((rows, cols)) * np.sqrt(2.0 / cols)


def _check_dims(rows: int, cols: int) -> None:
    if rows < 1 or cols < 1:
        raise ValueError(f"dimensions must be positive, got ({rows}, {cols})")
