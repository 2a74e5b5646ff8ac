"""Deterministic dense numerics, seeded random streams and a finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
"""
from __future__ import annotations

import hashlib
import zlib
from typing import Callable

import numpy as np

from .errors import OracleFailureError, RejectedInputError

Tensor = np.ndarray

# Fixed ids so that adding a stream never shifts another one's draws.
STREAM_IDS = {
    "data": 1,
    "init": 2,
    "routing-noise": 3,
    "sim-time": 4,
    "retry": 5,
    "task": 6,
}


def stream_id_for(name: str) -> int:
    if name in STREAM_IDS:
        return STREAM_IDS[name]
    return 1000 + zlib.crc32(name.encode("utf-8"))


def as_tensor(x, *, allow_nonfinite: bool = False) -> Tensor:
    t = np.ascontiguousarray(x, dtype=np.float64)
    if t.ndim == 0:
        t = t.reshape(1)
    if not allow_nonfinite and not np.all(np.isfinite(t)):
        raise RejectedInputError("tensor contains non-finite values")
    return t


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by the Philox counter generator, whose output is specified
    bit-for-bit independent of platform. ``counter`` counts the values
    drawn so far through this wrapper.
    """

    def __init__(self, seed: int, stream_id: int | str = 0):
        if isinstance(stream_id, str):
            stream_id = stream_id_for(stream_id)
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.counter = 0
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF],
                       dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        self.counter += out.size
        return out

    def uniform(self, shape=None) -> np.ndarray | float:
        out = self._gen.random(shape)
        self.counter += 1 if shape is None else int(np.prod(shape))
        return out

    def integers(self, low: int, high: int, shape=None):
        out = self._gen.integers(low, high, size=shape)
        self.counter += 1 if shape is None else int(np.prod(shape))
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)

    def spawn(self, name: str | int) -> "RngStream":
        """Independent child stream; does not advance this one."""
        sub = stream_id_for(name) if isinstance(name, str) else int(name)
        return RngStream(self.seed, (self.stream_id * 1_000_003 + sub) & 0x7FFFFFFFFFFFFFFF)

    def state(self) -> dict:
        bg = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream_id": self.stream_id,
            "counter": self.counter,
            "philox": {
                "counter": [int(v) for v in bg["state"]["counter"]],
                "key": [int(v) for v in bg["state"]["key"]],
                "buffer": [int(v) for v in bg["buffer"]],
                "buffer_pos": int(bg["buffer_pos"]),
                "has_uint32": int(bg["has_uint32"]),
                "uinteger": int(bg["uinteger"]),
            },
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], state["stream_id"])
        ph = state["philox"]
        rng._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(ph["counter"], dtype=np.uint64),
                "key": np.array(ph["key"], dtype=np.uint64),
            },
            "buffer": np.array(ph["buffer"], dtype=np.uint64),
            "buffer_pos": ph["buffer_pos"],
            "has_uint32": ph["has_uint32"],
            "uinteger": ph["uinteger"],
        }
        rng.counter = state["counter"]
        return rng


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise RejectedInputError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(logits: Tensor) -> Tensor:
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise RejectedInputError("softmax of non-finite logits")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(logits: Tensor) -> Tensor:
    x = np.asarray(logits, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def topk(values, k: int) -> list[tuple[int, float]]:
    """Largest ``k`` entries, ties resolved toward the lower index."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if not 1 <= k <= v.size:
        raise RejectedInputError(f"k={k} out of range for length {v.size}")
    # lexsort keys: last is primary
    order = np.lexsort((np.arange(v.size), -v))[:k]
    return [(int(i), float(v[i])) for i in order]


def topk_rows(values: Tensor, k: int) -> np.ndarray:
    """Row-wise index form of :func:`topk` for a 2-D array."""
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise RejectedInputError(f"k={k} out of range for length {n}")
    # stable argsort on -v keeps lower indices first among equal values
    return np.argsort(-v, axis=-1, kind="stable")[..., :k]


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float | None = None) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    The default step is ``1e-5 * max(1, |x_i|)`` per coordinate.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        hi = h if h is not None else 1e-5 * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + hi
        fp = float(f(x))
        flat[i] = orig - hi
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailureError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * hi)
    return g


def relative_error(a: Tensor, b: Tensor, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


def ema_update(state: tuple[float, float], x: float, decay: float) -> tuple[float, float]:
    if not 0.0 < decay < 1.0:
        raise RejectedInputError(f"decay must lie in (0, 1), got {decay}")
    mean, dev = state
    new_mean = decay * mean + (1.0 - decay) * x
    new_dev = decay * dev + (1.0 - decay) * abs(x - new_mean)
    return new_mean, new_dev


def global_norm(tensors) -> float:
    sq = 0.0
    for t in tensors:
        sq += float(np.sum(np.square(t)))
    return float(np.sqrt(sq))


def digest(arrays: dict[str, np.ndarray]) -> str:
    """Order-sensitive content hash of named float arrays."""
    h = hashlib.blake2b(digest_size=16)
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(np.asarray(a.shape, dtype="<i8").tobytes())
        h.update(a.tobytes())
    return h.hexdigest()
