"""Counter-based pseudo-random number generation.

Every random draw in this package (weight init, data shuffling, synthetic
image generation) goes through :class:`CounterRng` so that runs are
bit-reproducible from integer seeds alone, independent of platform RNG
state or library versions.

The generator is a pure function of ``(seed, stream, counter)``:

    base     = mix(mix(seed) ^ mix(stream * GAMMA + GAMMA))
    value_i  = mix(base + i * GAMMA)        for i = counter, counter+1, ...

where ``GAMMA = 0x9E3779B97F4A7C15`` and ``mix`` is the splitmix64
finalizer::

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

All arithmetic is modulo 2**64. Uniform doubles take the top 53 bits,
normals come from Box-Muller pairs over those uniforms.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MUL1) & _MASK
    z = ((z ^ (z >> 27)) * _MUL2) & _MASK
    return z ^ (z >> 31)


def _mix_vec(z: np.ndarray) -> np.ndarray:
    # uint64 multiplication wraps modulo 2**64, matching _mix.
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MUL1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MUL2)
    z ^= z >> np.uint64(31)
    return z


class CounterRng:
    """Deterministic splitmix64-style generator.

    ``stream`` selects an independent sequence for the same seed; the
    per-sample generators in the data simulator and the per-epoch shuffles
    in the trainers each use their index as the stream.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._base = _mix(_mix(self.seed) ^ _mix((self.stream * _GAMMA + _GAMMA) & _MASK))
        self._counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self._base) + idx * np.uint64(_GAMMA)
            return _mix_vec(z)

    def uniform(self, n: int | None = None):
        """Uniform doubles in [0, 1). Scalar when ``n`` is None."""
        m = 1 if n is None else n
        u = (self.next_u64(m) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if n is None else u

    def normal(self, n: int | None = None):
        """Standard normal doubles via Box-Muller. Scalar when ``n`` is None."""
        m = 1 if n is None else n
        pairs = (m + 1) // 2
        # u1 shifted into (0, 1] so log() is finite.
        u1 = ((self.next_u64(pairs) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (self.next_u64(pairs) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:m]
        return float(z[0]) if n is None else z

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        return lo + int(self.next_u64(1)[0] % np.uint64(span))

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n)."""
        return np.argsort(self.next_u64(n), kind="stable")
