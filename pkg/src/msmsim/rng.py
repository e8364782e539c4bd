"""Counter-based random streams keyed by (seed, individual, visit, purpose).

Every stream is a Philox generator whose 128-bit key is ``(seed, individual)``
and whose counter starts at ``(0, 0, purpose, visit + 1)``. Draws advance the
low counter words only, so distinct (visit, purpose) pairs never overlap and
the numbers an individual receives do not depend on which process simulates
it, or in which order.
"""

from __future__ import annotations

import enum

import numpy as np

_MASK64 = (1 << 64) - 1


class Purpose(enum.IntEnum):
    BASELINE = 1
    CONFOUNDER = 2
    TREATMENT = 3
    TIES = 4
    JITTER = 5
    FAILURE = 6
    DONOR = 7
    COMPETING = 8
    COMPETING_TIES = 9
    COMPETING_JITTER = 10
    REFRESH = 11


class StreamFactory:
    """Hands out independent generators for one (seed, individual) pair.

    One bit generator is kept per purpose and repositioned on each call, which
    is several times cheaper than constructing a new one. A stream therefore
    stays valid only until the next :meth:`stream` call with the same purpose;
    pass ``fresh=True`` for a generator that is never reused.
    """

    __slots__ = ("_key", "_pool")

    def __init__(self, seed: int, individual: int):
        self._key = np.array([int(seed) & _MASK64, int(individual) & _MASK64], dtype=np.uint64)
        self._pool = {}

    def _counter(self, visit, purpose):
        return np.array([0, 0, int(purpose), int(visit) + 1], dtype=np.uint64)

    def stream(self, visit: int, purpose: Purpose, fresh: bool = False) -> np.random.Generator:
        """Generator for ``visit`` (``-1`` for baseline draws) and ``purpose``."""
        counter = self._counter(visit, purpose)
        if fresh:
            return np.random.Generator(np.random.Philox(key=self._key, counter=counter))
        slot = self._pool.get(purpose)
        if slot is None:
            bg = np.random.Philox(key=self._key, counter=counter)
            self._pool[purpose] = (bg, np.random.Generator(bg))
            return self._pool[purpose][1]
        bg, gen = slot
        bg.state = {
            "bit_generator": "Philox",
            "state": {"counter": counter, "key": self._key},
            "buffer": np.zeros(4, dtype=np.uint64),
            "buffer_pos": 4,
            "has_uint32": 0,
            "uinteger": 0,
        }
        return gen


def substream(seed: int, individual: int) -> StreamFactory:
    return StreamFactory(seed, individual)


def open_uniform(rng: np.random.Generator, size=None):
    """Uniform draws on the open interval (0, 1)."""
    u = rng.random(size)
    if size is None:
        return u if u > 0.0 else 0.5 ** 54
    u[u == 0.0] = 0.5 ** 54
    return u
