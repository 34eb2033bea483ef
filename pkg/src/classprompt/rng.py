"""Deterministic random streams used everywhere in the package.

All randomness flows through a SplitMix64 stream so that identical seeds
give bit-identical integer draws on every platform and in every
implementation of this format. The algorithm, fixed here once and for
all:

    state_{n} = (state_{n-1} + 0x9E3779B97F4A7C15) mod 2^64
    z = state_n
    z = ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z = ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    output_n = z XOR (z >> 31)

Derived quantities are likewise pinned:

* uniforms:  u = ((output >> 11) + 1) * 2**-53, in (0, 1]
* normals:   Box-Muller on consecutive uniform pairs (u1, u2):
             r = sqrt(-2 ln u1), n1 = r cos(2 pi u2), n2 = r sin(2 pi u2).
             normals(n) consumes 2 * ceil(n / 2) raw outputs; for odd n
             the second normal of the final pair is discarded.
* bounded ints: rejection sampling, accepting raw outputs below
             2^64 - (2^64 mod n) and reducing mod n (no modulo bias).
* shuffle:   Fisher-Yates from the last index down to index 1, swapping
             position i with position draw_below(i + 1).
* substreams: derive(seed, tag) = mix64((seed XOR mix64(tag)) mod 2^64),
             where mix64 is the output function above applied to a single
             value (including the additive constant step).

The integer stream is bit-exact everywhere. Floating-point outputs are
deterministic for a given platform/libm; last-ulp differences across
platforms are possible and acceptable.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_TWO_NEG_53 = 2.0 ** -53


def mix64(value: int) -> int:
    """One full SplitMix64 step (add-gamma then finalize) on a single value."""
    z = (value + _GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def derive(seed: int, tag: int) -> int:
    """Deterministic substream seed for (seed, tag). See module docstring."""
    return mix64((seed ^ mix64(tag)) & MASK64)


def _bulk_raw(seed: int, start_index: int, count: int) -> np.ndarray:
    """Raw outputs for stream positions start_index+1 .. start_index+count.

    Vectorized form of the sequential recurrence: the state after n steps
    is seed + n*gamma mod 2^64, so outputs can be produced independently.
    """
    idx = np.arange(start_index + 1, start_index + count + 1, dtype=np.uint64)
    z = (np.uint64(seed & MASK64) + np.uint64(_GAMMA) * idx)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Sequential stream over the recurrence above.

    The whole stream state is the pair (seed, position); both are plain
    integers, which makes checkpointing trivial.
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = seed & MASK64
        self.position = position

    def state(self) -> dict:
        return {"seed": self.seed, "position": self.position}

    @classmethod
    def from_state(cls, state: dict) -> "SplitMix64":
        return cls(state["seed"], state["position"])

    def next_raw(self) -> int:
        self.position += 1
        return mix64((self.seed + (_GAMMA * (self.position - 1))) & MASK64)

    def raw(self, count: int) -> np.ndarray:
        out = _bulk_raw(self.seed, self.position, count)
        self.position += count
        return out

    def uniforms(self, count: int) -> np.ndarray:
        """Uniforms in (0, 1], 53-bit resolution."""
        bits = self.raw(count)
        return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_NEG_53

    def normals(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller; see module docstring for the layout."""
        if isinstance(shape, int):
            shape = (shape,)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if n == 0:
            return np.zeros(shape, dtype=np.float64)
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)

    def next_below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("next_below requires n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_raw()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> list:
        """In-place Fisher-Yates shuffle; returns the same list."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def rotation_matrix(dim: int, seed: int, strength: float) -> np.ndarray:
    """Orthonormal dim x dim matrix correlated with the identity.

    Columns of (I + strength * G), G a seeded standard-normal matrix filled
    row-major, are orthonormalized by modified Gram-Schmidt processed left
    to right: each column is reduced against the already-finished columns
    in index order (using the running, updated vector) and normalized last.
    strength = 0 returns the identity exactly; large strength approaches a
    uniformly random rotation.
    """
    stream = SplitMix64(seed)
    if strength == 0.0:
        return np.eye(dim)
    g = stream.normals((dim, dim))
    a = np.eye(dim) + strength * g
    q = np.zeros((dim, dim))
    for j in range(dim):
        v = a[:, j].copy()
        for i in range(j):
            v -= (q[:, i] @ v) * q[:, i]
        norm = math.sqrt(float(v @ v))
        if norm == 0.0:
            raise ValueError("degenerate column during orthonormalization")
        q[:, j] = v / norm
    return q
