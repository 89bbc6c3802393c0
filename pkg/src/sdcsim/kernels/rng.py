"""Counter-based random streams.

A draw is ``mix64(key + (counter + 1) * GAMMA)``: the SplitMix64 output
function applied to a counter instead of an evolving state, so any draw can
be computed directly from ``(key, counter)`` without replaying a sequence.
Streams are keyed by ``(global_seed, machine_id, purpose)`` which keeps each
machine's history independent of event interleaving.

The uint64 helpers below are written once and used two ways: compiled by
numba for scalar loops, and called directly on numpy arrays by the fallback
path. ``*_int`` twins on Python ints serve as the slow reference.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .._accel import njit

MASK64 = (1 << 64) - 1
GAMMA_INT = 0x9E3779B97F4A7C15
M1_INT = 0xBF58476D1CE4E5B9
M2_INT = 0x94D049BB133111EB

GAMMA = np.uint64(GAMMA_INT)
_M1 = np.uint64(M1_INT)
_M2 = np.uint64(M2_INT)
_S11 = np.uint64(11)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_ONE = np.uint64(1)
INV_2_53 = 1.0 / 9007199254740992.0


# -- Python int reference ---------------------------------------------------

def mix64_int(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * M1_INT) & MASK64
    z = ((z ^ (z >> 27)) * M2_INT) & MASK64
    return z ^ (z >> 31)


def draw_int(key: int, counter: int) -> int:
    return mix64_int(key + (counter + 1) * GAMMA_INT)


def draw2_int(key: int, a: int, b: int) -> int:
    return draw_int(draw_int(key, a), b)


def unit_int(u: int) -> float:
    return (u >> 11) * INV_2_53


# -- shared uint64 code (numba scalars / numpy arrays) ----------------------

def _build(jit):
    @jit
    def mix64(z):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        return z ^ (z >> _S31)

    @jit
    def draw(key, counter):
        return mix64(key + (counter + _ONE) * GAMMA)

    @jit
    def draw2(key, a, b):
        return draw(draw(key, a), b)

    @jit
    def unit(u):
        return (u >> _S11) * INV_2_53

    return mix64, draw, draw2, unit


# uint64 wraparound is the point; numpy only warns about it on scalars
_wrapping = np.errstate(over="ignore")
_mix64, _draw, _draw2, _unit = _build(_wrapping)
mix64_np, draw_np, draw2_np, unit_np = _mix64, _draw, _draw2, _unit
mix64_nb, draw_nb, draw2_nb, unit_nb = _build(njit)


# -- keys and streams --------------------------------------------------------

@functools.lru_cache(maxsize=4096)
def tag_id(tag: str) -> int:
    """Stable 64-bit id for a purpose tag (independent of PYTHONHASHSEED)."""
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


def derive_key(*parts: int | str) -> int:
    key = 0x5DC5DC5DC5DC5DC5
    for part in parts:
        value = tag_id(part) if isinstance(part, str) else int(part) & MASK64
        key = mix64_int(key ^ mix64_int(value + GAMMA_INT))
    return key


@dataclass
class CounterStream:
    """A keyed stream with a cursor.

    ``uniform(a, b)`` is pure in ``(key, a, b)``; the cursor only hands out
    fresh counters so callers that execute sequentially (one pattern run
    after another) do not have to track them.
    """

    key: int
    position: int = 0
    _np_key: np.uint64 = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.key &= MASK64
        self._np_key = np.uint64(self.key)

    @classmethod
    def for_machine(cls, global_seed: int, machine_id: int, purpose: str) -> "CounterStream":
        return cls(derive_key(global_seed, machine_id, purpose))

    def next_counter(self) -> int:
        c = self.position
        self.position += 1
        return c

    def u64(self, a: int, b: int | None = None) -> int:
        return draw_int(self.key, a) if b is None else draw2_int(self.key, a, b)

    def uniform(self, a: int, b: int | None = None) -> float:
        return unit_int(self.u64(a, b))

    def uniforms(self, start: int, count: int) -> np.ndarray:
        ctr = np.arange(start, start + count, dtype=np.uint64)
        return _unit(_draw(self._np_key, ctr))

    def snapshot(self) -> "CounterStream":
        return CounterStream(self.key, self.position)
