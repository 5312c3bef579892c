"""Dense float64 linear algebra and counter-based random streams.

A ``Matrix`` is a 2-D C-contiguous ``float64`` numpy array. Products are
accumulated in ascending inner index so results are bitwise reproducible
and equal to a naive triple loop.
"""

from __future__ import annotations

import hashlib

import numba
import numpy as np

from .errors import ShapeError

Matrix = np.ndarray

_U53 = 2.0**-53


def as_matrix(x) -> Matrix:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def eye(n: int) -> Matrix:
    return np.eye(n, dtype=np.float64)


@numba.njit(cache=True)
def _matmul_kernel(a, b):
    m, inner = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for k in range(inner):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with each output summed over ``k = 0, 1, ...`` in order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _matmul_kernel(a, b)


def _same_shape(a: Matrix, b: Matrix, op: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{op}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def sigmoid(x: Matrix) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh_m(x: Matrix) -> Matrix:
    return np.tanh(np.asarray(x, dtype=np.float64))


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    _same_shape(a, b, "hadamard")
    return np.multiply(a, b, dtype=np.float64)


def add(a: Matrix, b: Matrix) -> Matrix:
    _same_shape(a, b, "add")
    return np.add(a, b, dtype=np.float64)


def softmax_rows(x: Matrix) -> Matrix:
    """Row-wise softmax with max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"softmax_rows needs at least one row, got {x.shape}")
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def log_softmax_rows(x: Matrix) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# random streams


def stream_id(name: str, *index: int) -> int:
    """Stable 64-bit id for a named consumer (no reliance on ``hash()``)."""
    key = "/".join([name, *map(str, index)]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox-4x64; ``counter`` is the number of 64-bit words consumed,
    so a stream can be reconstructed at any position.
    """

    def __init__(self, seed: int, stream: int | str = 0, counter: int = 0):
        if isinstance(stream, str):
            stream = stream_id(stream)
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._bits = np.random.Philox(key=[self.seed, self.stream_id])
        self.counter = 0
        if counter:
            self._bits.advance(counter // 4)
            self.counter = counter - counter % 4
            self.raw(counter % 4)

    def split(self, name: str, *index: int) -> "RngStream":
        """Independent child stream; does not advance this one."""
        return RngStream(self.seed, stream_id(f"{self.stream_id:x}:{name}", *index))

    def raw(self, n: int) -> np.ndarray:
        out = self._bits.random_raw(n)
        self.counter += n
        return np.atleast_1d(out).astype(np.uint64)

    # scalar draws

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return float(self.uniform_array(lo, hi, 1)[0])

    def normal(self, mean: float = 0.0, sd: float = 1.0) -> float:
        return float(self.normal_array(mean, sd, 1)[0])

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range ``[lo, hi]``."""
        if lo > hi:
            raise ValueError(f"empty integer range [{lo}, {hi}]")
        n = hi - lo + 1
        if n == 1:
            return lo
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = int(self.raw(1)[0])
            if u < limit:
                return lo + u % n

    # vector draws

    def uniform_array(self, lo: float, hi: float, size: int) -> np.ndarray:
        if not lo <= hi:
            raise ValueError(f"invalid uniform range [{lo}, {hi}]")
        u = (self.raw(size) >> np.uint64(11)).astype(np.float64) * _U53
        return lo + (hi - lo) * u

    def normal_array(self, mean: float, sd: float, size: int) -> np.ndarray:
        if sd < 0:
            raise ValueError(f"negative standard deviation {sd}")
        half = (size + 1) // 2
        u1 = 1.0 - self.uniform_array(0.0, 1.0, half)  # (0, 1]
        u2 = self.uniform_array(0.0, 1.0, half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return mean + sd * z[:size]


def rng_uniform(s: RngStream, lo: float, hi: float) -> float:
    return s.uniform(lo, hi)


def rng_normal(s: RngStream, mean: float, sd: float) -> float:
    return s.normal(mean, sd)


def rng_int(s: RngStream, lo: int, hi: int) -> int:
    return s.integer(lo, hi)
