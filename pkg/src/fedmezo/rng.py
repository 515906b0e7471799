"""Counter-based deterministic randomness.

Every random draw in a simulation is addressed by ``(master_seed, round,
client, step, purpose)``.  The tuple is hashed into a 64-bit seed with a
SplitMix64 finalizer, and a :class:`SeedStream` built from that seed yields
``mix64(seed + j * GOLDEN)`` for its j-th draw.  Because the j-th draw is a
pure function of ``(seed, j)``, any slice of a Gaussian vector can be
regenerated on demand, which is what the in-place MeZO step relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB

_GOLDEN_U = np.uint64(GOLDEN)
_C1_U = np.uint64(_C1)
_C2_U = np.uint64(_C2)
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / (1 << 53)

# purpose tags keep the different consumers of one (t, i, k) cell apart
PURPOSE_PERTURB = 0
PURPOSE_BATCH = 1
PURPOSE_LR = 2
PURPOSE_INIT = 3
PURPOSE_PROBE = 4


class InvalidDimensionError(ValueError):
    pass


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int (result in [0, 2**64))."""
    x &= MASK64
    x ^= x >> 30
    x = (x * _C1) & MASK64
    x ^= x >> 27
    x = (x * _C2) & MASK64
    x ^= x >> 31
    return x


def mix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized :func:`mix64` over a uint64 array (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    x = x ^ (x >> np.uint64(30))
    x = x * _C1_U
    x = x ^ (x >> np.uint64(27))
    x = x * _C2_U
    x = x ^ (x >> np.uint64(31))
    return x


@dataclass(frozen=True)
class RngRecipe:
    master_seed: int
    t: int = 0
    i: int = 0
    k: int = 0
    purpose: int = PURPOSE_PERTURB


def derive_seed(recipe: RngRecipe) -> int:
    h = mix64(recipe.master_seed + GOLDEN)
    for field in (recipe.t, recipe.i, recipe.k, recipe.purpose):
        h = mix64((h ^ (field & MASK64)) + GOLDEN)
    return h


def derive_seeds(master_seed: int, t: int, i: int, ks, purpose: int = PURPOSE_PERTURB) -> np.ndarray:
    """Seeds for many step indices at once; matches :func:`derive_seed` exactly."""
    h = mix64(master_seed + GOLDEN)
    for field in (t, i):
        h = mix64((h ^ (field & MASK64)) + GOLDEN)
    ks = np.asarray(ks, dtype=np.uint64)
    arr = mix64_array((np.uint64(h) ^ ks) + _GOLDEN_U)
    return mix64_array((arr ^ np.uint64(purpose & MASK64)) + _GOLDEN_U)


def _uniform_from_bits(bits: np.ndarray) -> np.ndarray:
    # 53 high bits, shifted by half an ulp so the result is in (0, 1)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53


def _box_muller(u1: np.ndarray, u2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(-2.0 * np.log(u1))
    ang = _TWO_PI * u2
    return r * np.cos(ang), r * np.sin(ang)


def gaussian_block(seed: int, start: int, count: int) -> np.ndarray:
    """Coordinates ``start .. start+count-1`` of the Gaussian vector of ``seed``.

    ``start`` must be even so that Box-Muller pairs are never split.
    """
    if start % 2:
        raise ValueError("gaussian blocks must start on an even coordinate")
    if count <= 0:
        raise InvalidDimensionError(f"count must be positive, got {count}")
    npairs = (count + 1) // 2
    first = start + 1
    counters = np.arange(first, first + 2 * npairs, dtype=np.uint64)
    bits = mix64_array(np.uint64(seed) + counters * _GOLDEN_U)
    u = _uniform_from_bits(bits)
    z0, z1 = _box_muller(u[0::2], u[1::2])
    out = np.empty(2 * npairs)
    out[0::2] = z0
    out[1::2] = z1
    return out[:count]


def gaussian_matrix(seeds: np.ndarray, d: int) -> np.ndarray:
    """Row k is the length-d Gaussian vector of ``seeds[k]`` (same values as :func:`gaussian_block`)."""
    if d <= 0:
        raise InvalidDimensionError(f"d must be positive, got {d}")
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1, 1)
    npairs = (d + 1) // 2
    counters = np.arange(1, 2 * npairs + 1, dtype=np.uint64).reshape(1, -1)
    bits = mix64_array(seeds + counters * _GOLDEN_U)
    u = _uniform_from_bits(bits)
    z0, z1 = _box_muller(u[:, 0::2], u[:, 1::2])
    out = np.empty((seeds.shape[0], 2 * npairs))
    out[:, 0::2] = z0
    out[:, 1::2] = z1
    return out[:, :d]


class SeedStream:
    """Single-owner generator; restarting from the same seed replays every draw."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.draws_emitted = 0

    @classmethod
    def from_recipe(cls, recipe: RngRecipe) -> "SeedStream":
        return cls(derive_seed(recipe))

    def next_u64(self, n: int) -> np.ndarray:
        counters = np.arange(self.draws_emitted + 1, self.draws_emitted + n + 1, dtype=np.uint64)
        self.draws_emitted += n
        return mix64_array(np.uint64(self.seed) + counters * _GOLDEN_U)

    def uniform(self, n: int) -> np.ndarray:
        return _uniform_from_bits(self.next_u64(n))

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers uniform on ``[0, high)`` (float-scaling; bias < 2**-40 for our sizes)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def gaussian(self, d: int) -> np.ndarray:
        if d <= 0:
            raise InvalidDimensionError(f"d must be positive, got {d}")
        if self.draws_emitted % 2:
            # keep Box-Muller pairs aligned after an odd uniform draw
            self.draws_emitted += 1
        start = self.draws_emitted
        out = gaussian_block(self.seed, start, d)
        self.draws_emitted += 2 * ((d + 1) // 2)
        return out


def sample_gaussian(stream: SeedStream, d: int) -> np.ndarray:
    return stream.gaussian(d)
