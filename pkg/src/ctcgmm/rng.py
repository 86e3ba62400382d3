"""Counter-based deterministic random number generator.

The generator is a splitmix64 keyed by (seed, counter): draw n is the
splitmix64 mix of ``seed + n * GOLDEN``.  Identical seeds therefore yield
byte-identical streams on every platform, independent of numpy's global
state, and streams can be split cheaply for independent consumers
(per-utterance feature noise, per-example sampling, parameter init).
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = 0xFFFFFFFFFFFFFFFF
# 2^-53, top 53 bits of a u64 give a uniform double in [0, 1)
_INV_2_53 = 1.0 / float(1 << 53)


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer over an array of uint64."""
    with np.errstate(over="ignore"):
        x = x.astype(np.uint64)
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        x = x ^ (x >> np.uint64(31))
    return x


class Rng:
    """Deterministic stream of uniforms/normals/integers from a 64-bit seed.

    State is just (seed, counter); every draw advances the counter, so the
    value sequence depends only on the seed and the call sequence.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64_MASK
        self.counter = 0

    def split(self, stream: int) -> "Rng":
        """Independent child stream; deterministic in (seed, stream)."""
        tag = _mix(np.array([(self.seed + 0x632BE59BD9B4E019 + stream) & _U64_MASK],
                            dtype=np.uint64))[0]
        return Rng(int(tag))

    def _raw(self, n: int) -> np.ndarray:
        base = np.uint64(self.seed)
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            keys = base + idx * _GOLDEN
        return _mix(keys)

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def uniform(self, n: int | None = None) -> float | np.ndarray:
        """Uniform doubles in [0, 1)."""
        m = 1 if n is None else n
        u = (self._raw(m) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return float(u[0]) if n is None else u

    def randint(self, bound: int, n: int | None = None) -> int | np.ndarray:
        """Integers in [0, bound) by scaled uniform (bound << 2^53, bias negligible)."""
        if bound <= 0:
            raise ValueError("randint bound must be positive")
        m = 1 if n is None else n
        u = self.uniform(m)
        vals = np.minimum((u * bound).astype(np.int64), bound - 1)
        return int(vals[0]) if n is None else vals

    def normal(self, n: int | None = None, std: float = 1.0) -> float | np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        m = 1 if n is None else n
        pairs = (m + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        # guard log(0)
        u1 = np.maximum(u[:, 0], _INV_2_53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:m] * std
        return float(z[0]) if n is None else z

    def choice(self, probs) -> int:
        """Sample an index from a probability vector (sums to ~1)."""
        p = np.asarray(probs, dtype=np.float64)
        c = np.cumsum(p)
        u = self.uniform() * c[-1]
        return int(np.searchsorted(c, u, side="right").clip(0, len(p) - 1))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates using this stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
