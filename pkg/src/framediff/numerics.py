"""Dense float64 tensors and counter-based deterministic randomness.

Tensors are plain numpy ``float64`` arrays in row-major (C) order.  The
helpers here are the validation boundary: every public operation checks
shapes and rejects non-finite values, so NaN/Inf never leak silently into
the rest of the engine.

Randomness is counter-based (Philox).  Every draw is a pure function of
``(seed, stream_id, counter)``: replaying a pipeline with the same stream
assignments reproduces bit-identical floats regardless of evaluation
order, and distinct stream ids give statistically independent streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_U64 = 2**64


def as_tensor(values, name: str = "tensor") -> np.ndarray:
    """Coerce to a C-contiguous float64 array, rejecting non-finite entries."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    require_finite(arr, name)
    return arr


def require_finite(arr: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def matmul(a, b) -> np.ndarray:
    """Row-major matrix product with explicit dimension checking."""
    a = as_tensor(a, "matmul lhs")
    b = as_tensor(b, "matmul rhs")
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = a @ b
    require_finite(out, "matmul result")
    return out


def sym_eigen(a, sym_tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as columns, so ``a == V @ diag(lam) @ V.T`` up to float
    round-off.  Inputs asymmetric beyond ``sym_tol`` are rejected.
    """
    a = as_tensor(a, "sym_eigen input")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_eigen expects a square matrix, got {a.shape}")
    if a.size and np.max(np.abs(a - a.T)) > sym_tol:
        raise ValueError("sym_eigen input is not symmetric")
    lam, vec = np.linalg.eigh(a)
    require_finite(lam, "eigenvalues")
    return lam, np.ascontiguousarray(vec)


def _check_u64(value: int, name: str) -> int:
    value = int(value)
    if not 0 <= value < _U64:
        raise ValueError(f"{name} must fit in an unsigned 64-bit integer")
    return value


@dataclass
class RngStream:
    """A deterministic random stream addressed by (seed, stream_id, counter).

    Each draw call instantiates Philox at the current counter and then
    advances the counter by one, so draws are indexed, not stateful: two
    streams with equal triples produce equal outputs on any platform, and
    concurrent users only need distinct stream ids.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed = _check_u64(self.seed, "seed")
        self.stream_id = _check_u64(self.stream_id, "stream_id")
        self.counter = _check_u64(self.counter, "counter")

    def split(self, stream_id: int) -> "RngStream":
        """A fresh independent stream under the same seed."""
        return RngStream(self.seed, stream_id, 0)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        # The call counter sits in word 2 of the 256-bit Philox counter, so
        # each call owns a 2**128-block segment and calls can never overlap.
        ctr = np.array([0, 0, self.counter, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(counter=ctr, key=key))

    def _advance(self) -> np.random.Generator:
        gen = self._generator()
        self.counter = (self.counter + 1) % _U64
        return gen

    def normal(self, shape) -> np.ndarray:
        shape = _check_shape(shape)
        return self._advance().standard_normal(size=shape, dtype=np.float64)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = _check_shape(shape)
        u = self._advance().random(size=shape, dtype=np.float64)
        return low + (high - low) * u

    def integers(self, shape, n: int) -> np.ndarray:
        """Uniform integers in [0, n), derived from the same counter space."""
        if n < 1:
            raise ValueError("integers() needs n >= 1")
        shape = _check_shape(shape)
        u = self._advance().random(size=shape, dtype=np.float64)
        return np.minimum((u * n).astype(np.int64), n - 1)

    def state(self) -> tuple[int, int, int]:
        return (self.seed, self.stream_id, self.counter)


def _check_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ValueError(f"shape extents must be positive, got {shape}")
    return shape


def gaussian(rng: RngStream, shape) -> np.ndarray:
    """I.i.d. standard normal tensor; advances the stream counter once."""
    out = rng.normal(shape)
    require_finite(out, "gaussian draw")
    return out
