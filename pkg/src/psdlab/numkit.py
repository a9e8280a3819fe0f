"""Deterministic dense numeric kernels and the seeded random stream.

All matrices are C-contiguous float64 numpy arrays (row-major). Plumbing that
numpy already provides well (matmul, transpose, fancy row selection,
elementwise ops) is used directly on those arrays; this module adds the
probability kernels with their exact contracts and a self-contained PRNG so
that every random draw in the package is bit-reproducible from a 64-bit seed,
independent of platform or numpy version.

Everything here is a pure function over immutable inputs except RngState,
which is single-owner mutable state.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateInputError, InvalidInputError

_LOG_FLOOR = 1e-300

_MASK64 = (1 << 64) - 1


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate ``a`` as a finite 2-D float64 array and return it C-contiguous."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got ndim={m.ndim}")
    if not np.isfinite(m).all():
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return m


def softmax_rows(m, scale: float) -> np.ndarray:
    """Row-wise softmax of ``scale * m`` with per-row max subtraction.

    ``scale`` multiplies the logits (it plays the role of an inverse
    temperature). Each output row is nonnegative and sums to 1.
    """
    m = as_matrix(m, "softmax input")
    if not (math.isfinite(scale) and scale > 0.0):
        raise InvalidInputError(f"softmax scale must be a positive real, got {scale}")
    logits = scale * m
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits


def cross_entropy_rows(targets, probs) -> float:
    """Mean over rows of -sum_j targets[i,j] * log(probs[i,j]).

    Probabilities are floored at 1e-300 before the log so exactly-stochastic
    rows stay untouched. An input with zero rows returns 0.0 by definition.
    """
    t = as_matrix(targets, "targets")
    p = as_matrix(probs, "probs")
    if t.shape != p.shape:
        raise InvalidInputError(f"shape mismatch: targets {t.shape} vs probs {p.shape}")
    if t.shape[0] == 0:
        return 0.0
    logp = np.log(np.maximum(p, _LOG_FLOOR))
    return float(-(t * logp).sum() / t.shape[0])


def normalize_rows_l2(m) -> np.ndarray:
    """Scale each row to unit Euclidean norm; rejects rows with norm < 1e-12."""
    m = as_matrix(m, "normalize input")
    norms = np.sqrt((m * m).sum(axis=1))
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise DegenerateInputError(f"row {int(bad[0])} has near-zero norm, cannot normalize")
    return m / norms[:, None]


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next state, output word)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seed(base: int, *tags: int) -> int:
    """Derive an independent stream seed from a base seed and integer tags.

    Pure splitmix64 chain: feeding each tag through the mix keeps streams for
    different (label, epoch) combinations decorrelated and reproducible.
    """
    state = base & _MASK64
    for tag in tags:
        state, out = _splitmix64(state ^ (tag & _MASK64))
        state ^= out
    _, out = _splitmix64(state)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class RngState:
    """xoshiro256** generator seeded via splitmix64.

    Fixed published constants; identical seeds produce bit-identical streams
    on every platform. Instances are single-owner: never share one across
    threads.
    """

    __slots__ = ("seed", "_s")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        state = self.seed
        s = []
        for _ in range(4):
            state, word = _splitmix64(state)
            s.append(word)
        self._s = s

    def spawn(self, *tags: int) -> "RngState":
        """Child stream keyed on this seed plus integer tags."""
        return RngState(derive_seed(self.seed, *tags))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        next_u64 = self.next_u64
        for i in range(n):
            out[i] = (next_u64() >> 11) * 2.0**-53
        return out

    def normals(self, *shape: int) -> np.ndarray:
        """Standard normals via pairwise Box-Muller.

        Consumes exactly 2*ceil(size/2) uniforms; the first of each pair is
        shifted into (0, 1] so the log is always finite.
        """
        size = 1
        for dim in shape:
            size *= dim
        pairs = (size + 1) // 2
        u = np.empty(2 * pairs, dtype=np.float64)
        next_u64 = self.next_u64
        for i in range(2 * pairs):
            u[i] = next_u64() >> 11
        u1 = (u[0::2] + 1.0) * 2.0**-53
        u2 = u[1::2] * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:size].reshape(shape) if shape else z[0]

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (no modulo bias)."""
        if n <= 0:
            raise InvalidInputError(f"randint bound must be positive, got {n}")
        bound = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < bound:
                return x % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of 0..n-1."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
