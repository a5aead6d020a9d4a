"""Counter-based keyed random numbers.

Every draw is a pure function of (seed, step, tensor_id, flat index), so
rounding decisions and dropout masks are reproducible no matter how the
work is chunked, blocked, or parallelized.  The mixer is the splitmix64
finalizer applied over the key words.
"""

from __future__ import annotations

import numpy as np

__all__ = ["RoundingRng", "tensor_tag"]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64
_INV_2_53 = 1.0 / (1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _M1
    z = (z ^ (z >> _U64(27))) * _M2
    return z ^ (z >> _U64(31))


def tensor_tag(name: str) -> int:
    """Stable 64-bit id for a named tensor (FNV-1a)."""
    h = 0xCBF29CE484222325
    for b in name.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class RoundingRng:
    """Keyed generator of uniform draws in [0, 1)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def _base(self, step: int, tensor_id: int) -> np.uint64:
        h = _mix(_U64(self.seed) + _GAMMA)
        h = _mix(h + _U64(step & 0xFFFFFFFFFFFFFFFF) * _GAMMA)
        h = _mix(h + _U64(tensor_id & 0xFFFFFFFFFFFFFFFF) * _GAMMA)
        return h

    def bits(self, step: int, tensor_id: int, index) -> np.ndarray:
        """64-bit hash words for the given element indices."""
        idx = np.asarray(index, dtype=np.uint64)
        with np.errstate(over="ignore"):
            return _mix(self._base(step, tensor_id) + idx * _GAMMA)

    def uniform(self, step: int, tensor_id: int, index) -> np.ndarray:
        """Uniform [0, 1) draw per element index (scalar or array)."""
        h = self.bits(step, tensor_id, index)
        return (h >> _U64(11)).astype(np.float64) * _INV_2_53
