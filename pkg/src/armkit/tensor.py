"""Numeric core: dense ops, robust statistics and a counter-based RNG.

Tensors are plain numpy arrays. Model code runs in float32, the theory
checks in float64. Every op here rejects NaN/Inf in its result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "RngStream",
    "activation_fn",
    "activation_grad",
    "activation_grad2",
    "mad",
    "matmul",
    "median",
    "percentile",
    "rmsnorm",
    "softmax_rows",
    "splitmix64",
    "uniform",
]

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class NonFiniteError(ValueError):
    """Raised when an operation produces NaN or Inf."""


def _finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{op}: non-finite values in result")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a[m, k]`` and ``b[k, n]``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    return _finite(a @ b, "matmul")


def softmax_rows(logits: np.ndarray, causal_mask: bool = False) -> np.ndarray:
    """Row softmax with max subtraction.

    With ``causal_mask`` entry ``[i, j]`` for ``j > i`` is exactly zero.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise ValueError(f"softmax_rows: expected 2-D logits, got {logits.shape}")
    m, n = logits.shape
    if n == 0:
        raise ValueError("softmax_rows: all-masked row")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("softmax_rows: non-finite logits")
    if causal_mask:
        keep = np.tri(m, n, dtype=bool)
        if not keep.any(axis=1).all():
            raise ValueError("softmax_rows: all-masked row")
        x = np.where(keep, logits, -np.inf)
    else:
        keep = None
        x = logits
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    if keep is not None:
        e = np.where(keep, e, 0)
    return _finite(e / e.sum(axis=1, keepdims=True), "softmax_rows")


def rmsnorm(x: np.ndarray, gamma: np.ndarray, eps: float) -> np.ndarray:
    """``gamma * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    x = np.asarray(x)
    ms = np.mean(x * x, axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    # eps == 0 with a zero row: define the output as zero
    safe = np.where(r > 0, r, 1)
    return _finite(np.asarray(gamma) * (x / safe), "rmsnorm")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation_fn(x: np.ndarray, kind: str = "silu") -> np.ndarray:
    """SiLU, or GELU in its tanh approximation (cubic coefficient 0.044715)."""
    x = np.asarray(x)
    if kind == "silu":
        y = x * _sigmoid(x)
    elif kind == "gelu":
        y = 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + GELU_COEF * x**3)))
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _finite(y, "activation_fn")


def activation_grad(x, kind: str = "silu"):
    """First derivative of :func:`activation_fn`."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "silu":
        s = _sigmoid(x)
        return s + x * s * (1 - s)
    if kind == "gelu":
        u = _SQRT_2_OVER_PI * (x + GELU_COEF * x**3)
        du = _SQRT_2_OVER_PI * (1 + 3 * GELU_COEF * x**2)
        t = np.tanh(u)
        return 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad2(x, kind: str = "silu"):
    """Second derivative of :func:`activation_fn`."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "silu":
        s = _sigmoid(x)
        return s * (1 - s) * (2 + x * (1 - 2 * s))
    if kind == "gelu":
        u = _SQRT_2_OVER_PI * (x + GELU_COEF * x**3)
        du = _SQRT_2_OVER_PI * (1 + 3 * GELU_COEF * x**2)
        d2u = _SQRT_2_OVER_PI * 6 * GELU_COEF * x
        t = np.tanh(u)
        sech2 = 1 - t * t
        return sech2 * du + 0.5 * x * (sech2 * d2u - 2 * t * sech2 * du * du)
    raise ValueError(f"unknown activation {kind!r}")


def _flat(values, op: str) -> np.ndarray:
    v = np.asarray(values).ravel()
    if v.size == 0:
        raise ValueError(f"{op}: empty input")
    return v


def median(values: Sequence[float] | np.ndarray) -> float:
    """Median; even length averages the two central order statistics."""
    v = _flat(values, "median")
    n = v.size
    h = n // 2
    if n % 2:
        return float(np.partition(v, h)[h])
    part = np.partition(v, (h - 1, h))
    return (float(part[h - 1]) + float(part[h])) / 2.0


def mad(values: Sequence[float] | np.ndarray) -> float:
    """Median absolute deviation, ``median(|v - median(v)|)``, unscaled."""
    v = _flat(values, "mad")
    m = median(v)
    return median(np.abs(v.astype(np.float64) - m))


def percentile(values: Sequence[float] | np.ndarray, q: float) -> float:
    """Linear-interpolation percentile at rank ``q/100 * (n-1)``."""
    v = _flat(values, "percentile")
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"percentile: q={q} outside [0, 100]")
    return _percentile_from(lambda ks: np.partition(v, ks), v.size, q)


def _percentile_from(partition, n: int, q: float) -> float:
    rank = q / 100.0 * (n - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, n - 1)
    frac = rank - lo
    part = partition((lo, hi) if hi != lo else lo)
    a, b = float(part[lo]), float(part[hi])
    return lerp(a, b, frac)


def lerp(a: float, b: float, frac: float) -> float:
    return a + (b - a) * frac


# -- counter-based RNG -------------------------------------------------------
#
# Each draw hashes (seed, counter) with the splitmix64 finalizer:
#     key   = mix(seed)
#     z     = mix(key + (counter + 1) * 0x9E3779B97F4A7C15)   (mod 2**64)
#     mix(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
#             z ^= z >> 27; z *= 0x94D049BB133111EB
#             z ^= z >> 31
# and a unit float is (z >> 11) * 2**-53, in [0, 1).

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1
_U53 = 1.0 / (1 << 53)


def splitmix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


@dataclass
class RngStream:
    """Counter-based stream: draw ``i`` depends only on ``(seed, i)``.

    Not thread-safe; give each worker its own stream.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed &= MASK64
        self.counter &= MASK64
        self.key = splitmix64(self.seed)

    def next_u64(self) -> int:
        z = splitmix64(self.key + (self.counter + 1) * GOLDEN)
        self.counter = (self.counter + 1) & MASK64
        return z

    def random(self) -> float:
        return (self.next_u64() >> 11) * _U53

    def random_array(self, n: int) -> np.ndarray:
        """``n`` unit floats; identical to ``n`` calls of :meth:`random`."""
        c = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + c * np.uint64(GOLDEN)
        z = _mix_array(z)
        self.counter = (self.counter + n) & MASK64
        return (z >> np.uint64(11)).astype(np.float64) * _U53

    def uniform_array(self, lo, hi, n: int | None = None) -> np.ndarray:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError("uniform: lo > hi")
        if n is None:
            n = int(np.broadcast(lo, hi).size)
        u = self.random_array(n)
        out = lo + (hi - lo) * u
        # rounding can land exactly on hi; keep the interval half-open
        return np.where((out >= hi) & (hi > lo), np.nextafter(hi, lo), out)

    def spawn(self, tag: int) -> "RngStream":
        """Independent sub-stream: ``seed XOR tag``."""
        return RngStream(self.seed ^ (tag & MASK64))


def uniform(rng: RngStream, lo: float, hi: float) -> float:
    """One draw in ``[lo, hi)``; advances the counter by one."""
    if lo > hi:
        raise ValueError(f"uniform: lo={lo} > hi={hi}")
    u = rng.random()
    out = lo + (hi - lo) * u
    if out >= hi and hi > lo:
        out = math.nextafter(hi, lo)
    return out
