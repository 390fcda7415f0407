"""Counter-based SplitMix64 streams.

Every random draw in the synthetic generators is a pure function of
``(seed, stream, counter)``, so fixtures can be reproduced bit-exactly by
any implementation that follows the constants below:

    GOLDEN = 0x9E3779B97F4A7C15
    mix(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
             z = (z ^ (z >> 27)) * 0x94D049BB133111EB
             return z ^ (z >> 31)
    key(seed, stream) = mix(seed ^ mix(stream * GOLDEN))
    word(key, i)      = mix(key + (i + 1) * GOLDEN)          (all mod 2**64)

Uniforms use the top 53 bits: ``((w >> 11) + 1) * 2**-53`` in (0, 1].
Normals are standardized Irwin-Hall sums of four uniforms, which need no
transcendental functions and are therefore identical on every platform.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SQRT3 = float(np.sqrt(3.0))


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):  # wrap-around is the point
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, stream: int) -> np.uint64:
    with np.errstate(over="ignore"):
        s = mix64(np.array([stream], dtype=np.uint64) * GOLDEN)
    return mix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) ^ s)[0]


def words(seed: int, stream: int, count: int, offset: int = 0) -> np.ndarray:
    key = stream_key(seed, stream)
    idx = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(key + idx * GOLDEN)


def uniform(seed: int, stream: int, count: int) -> np.ndarray:
    w = words(seed, stream, count)
    return ((w >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0**-53


def normal(seed: int, stream: int, count: int) -> np.ndarray:
    """Zero-mean, unit-variance draws (Irwin-Hall n=4, bounded by +-2*sqrt(3))."""
    w = words(seed, stream, 4 * count).reshape(count, 4)
    u = ((w >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0**-53
    # sequential adds keep the rounding order fixed
    acc = u[:, 0] + u[:, 1]
    acc = acc + u[:, 2]
    acc = acc + u[:, 3]
    return (acc - 2.0) * _SQRT3
