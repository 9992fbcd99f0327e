"""Dense float64 linear algebra kernels with analytic backward passes.

Everything downstream (encoders, losses, fusion, training) is built on the
forward/backward pairs in this module plus the central finite-difference
oracle used to verify them.  All arrays are 2-D, row-major, 64-bit floats;
reductions use numpy's fixed left-to-right order, so results are
deterministic for identical inputs.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MATRIX_MAGIC = b"RCM1"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a computation produces or receives non-finite values."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array, rejecting non-finite data."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return a


# ---------------------------------------------------------------------------
# deterministic splittable RNG
# ---------------------------------------------------------------------------

class SplitRng:
    """Deterministic RNG with labeled child streams.

    A (seed, stream) pair fully determines the draw sequence.  Child streams
    are derived by hashing a string label into a 64-bit stream id, so
    distinct labels give independent PCG64 streams regardless of the order
    in which they are created.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF

    def child(self, label: str) -> "SplitRng":
        digest = hashlib.blake2b(
            label.encode("utf-8"),
            digest_size=8,
            key=struct.pack("<QQ", self.seed, self.stream),
        ).digest()
        return SplitRng(self.seed, int.from_bytes(digest, "little"))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, self.stream)))
        )


# ---------------------------------------------------------------------------
# forward/backward kernels
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """y = x @ w + b with b broadcast per row.  Returns (y, cache)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine shape mismatch: x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} incompatible with w {w.shape}")
    y = x @ w + b
    return y, (x, w)


def affine_backward(dy: np.ndarray, cache):
    """Gradients of an affine layer: returns (dx, dw, db)."""
    x, w = cache
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0)
    return dx, dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x


def relu_backward(dy: np.ndarray, cache):
    x = cache
    return dy * (x > 0.0)


def sigmoid_forward(x: np.ndarray):
    # split by sign to avoid overflow in exp
    y = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_backward(dy: np.ndarray, cache):
    y = cache
    return dy * y * (1.0 - y)


def tanh_forward(x: np.ndarray):
    y = np.tanh(x)
    return y, y


def tanh_backward(dy: np.ndarray, cache):
    y = cache
    return dy * (1.0 - y * y)


ACTIVATIONS = {
    "relu": (relu_forward, relu_backward),
    "sigmoid": (sigmoid_forward, sigmoid_backward),
    "tanh": (tanh_forward, tanh_backward),
    "none": (lambda x: (x, None), lambda dy, cache: dy),
}


def l2_normalize_rows(x: np.ndarray, eps: float = 1e-12):
    """Divide each row by max(||row||, eps).  Returns (y, cache).

    Rows whose norm falls below eps are scaled by 1/eps instead (a plain
    linear map), so a zero row stays zero rather than producing NaNs.
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.sum(x * x, axis=1))
    denom = np.maximum(norms, eps)
    y = x / denom[:, None]
    clipped = norms < eps
    return y, (y, denom, clipped)


def l2_normalize_rows_backward(dy: np.ndarray, cache):
    y, denom, clipped = cache
    # non-clipped rows: dx = (dy - y (y . dy)) / ||x||; clipped rows are linear
    dots = np.sum(dy * y, axis=1)
    dx = (dy - y * dots[:, None]) / denom[:, None]
    if np.any(clipped):
        dx[clipped] = dy[clipped] / denom[clipped, None]
    return dx


def batch_standardize(x: np.ndarray, eps: float = 1e-8):
    """Zero-mean, unit-variance per column (population variance).

    Returns (y, cache).  Requires at least two rows.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise ShapeError(f"batch_standardize needs >= 2 rows, got {x.shape[0]}")
    mu = x.mean(axis=0)
    var = ((x - mu) ** 2).mean(axis=0)
    s = np.sqrt(var + eps)
    y = (x - mu) / s
    return y, (y, s, x.shape[0])


def batch_standardize_backward(dy: np.ndarray, cache):
    y, s, n = cache
    # standard batch-norm backward (population variance, no affine params)
    return (dy - dy.mean(axis=0) - y * (dy * y).mean(axis=0)) / s


def finite_diff_grad(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.copy()
    for i in range(flat.size):
        orig = flat.flat[i]
        flat.flat[i] = orig + h
        fp = float(f(flat))
        flat.flat[i] = orig - h
        fm = float(f(flat))
        flat.flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(
                f"finite_diff_grad: non-finite evaluation at coordinate {i}"
            )
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# matrix serialization: magic "RCM1", u64 rows, u64 cols, row-major float64
# ---------------------------------------------------------------------------

def matrix_to_bytes(m: np.ndarray) -> bytes:
    m = as_matrix(m)
    header = MATRIX_MAGIC + struct.pack("<QQ", m.shape[0], m.shape[1])
    return header + m.astype("<f8").tobytes(order="C")


def matrix_from_bytes(blob: bytes, offset: int = 0):
    """Parse one serialized matrix; returns (matrix, next_offset)."""
    if blob[offset:offset + 4] != MATRIX_MAGIC:
        raise ValueError("bad matrix magic")
    rows, cols = struct.unpack_from("<QQ", blob, offset + 4)
    start = offset + 20
    end = start + rows * cols * 8
    if end > len(blob):
        raise ValueError("truncated matrix blob")
    data = np.frombuffer(blob[start:end], dtype="<f8").reshape(rows, cols)
    return np.ascontiguousarray(data), end


def save_matrix(path, m: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(matrix_to_bytes(m))


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    m, end = matrix_from_bytes(blob)
    if end != len(blob):
        raise ValueError(f"trailing bytes in matrix file {path}")
    return m
