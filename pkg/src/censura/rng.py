"""Counter-based random number streams.

Every stochastic component derives its generator from a run seed plus a few
stream identifiers, so independent pieces of work (ensemble members, epochs,
Monte Carlo passes) never share or race a stream, and repeated runs are
bitwise reproducible across platforms.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_rng(seed, a=0, b=0, c=0):
    """Generator on a Philox stream keyed by (seed, a) at counter (b, c).

    Distinct (seed, a, b, c) tuples give statistically independent streams.
    """
    key = np.array([seed & _MASK64, a & _MASK64], dtype=np.uint64)
    counter = np.array([b & _MASK64, c & _MASK64, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def standard_normal(rng, size):
    """Standard normal draws via the Box-Muller transform.

    Built on the generator's uniform stream only, so the bit pattern of the
    output depends on nothing but the Philox stream itself.
    """
    n = int(np.prod(size)) if not np.isscalar(size) else int(size)
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]: keeps log() finite
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
    return z.reshape(size) if not np.isscalar(size) else z
