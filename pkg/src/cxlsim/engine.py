"""Simulation kernel: integer-picosecond event queue, clocks, RNG, statistics.

Time is a plain ``int`` count of picoseconds. Events fire in (time, sequence)
order where the sequence number is a global insertion counter, so handlers
scheduled at the same tick run FIFO and every run of the same program is
bit-identical.
"""

from __future__ import annotations

import heapq
import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable, Optional

SimTime = int  # picoseconds

PS_PER_NS = 1000
PS_PER_US = 1_000_000


class SimError(Exception):
    """Base class for simulation faults."""


class EventLimitExceeded(SimError):
    """The kernel delivered more events than its configured ceiling."""


def ns(value) -> SimTime:
    """Convert nanoseconds (int, float or string) to integer picoseconds.

    Uses Fraction so decimal literals like 575.6 convert exactly.
    """
    ps = Fraction(str(value)) * PS_PER_NS
    if ps.denominator != 1:
        raise ValueError(f"{value} ns is not an integer number of picoseconds")
    return int(ps)


def us(value) -> SimTime:
    ps = Fraction(str(value)) * PS_PER_US
    if ps.denominator != 1:
        raise ValueError(f"{value} us is not an integer number of picoseconds")
    return int(ps)


class ClockDomain:
    """A frequency domain whose cycle length is kept as an exact rational.

    1.5 GHz has a period of 2000/3 ps; storing the rational and accumulating
    cycle counts exactly avoids cumulative rounding drift. Single conversions
    round to the nearest picosecond (at most 0.5 ps of error, never
    accumulated).
    """

    def __init__(self, freq_mhz: int):
        if freq_mhz <= 0:
            raise ValueError("frequency must be positive")
        self.freq_mhz = freq_mhz
        self.period_ps = Fraction(PS_PER_US, freq_mhz)

    def cycles_to_ps(self, cycles: int) -> SimTime:
        exact = cycles * self.period_ps
        return int(exact) if exact.denominator == 1 else round(exact)

    def counter(self) -> "CycleCounter":
        return CycleCounter(self)

    def __repr__(self) -> str:
        return f"ClockDomain({self.freq_mhz} MHz)"


class CycleCounter:
    """Exact cycle accumulator: emits integer-ps deltas, carries the remainder."""

    def __init__(self, domain: ClockDomain):
        self.domain = domain
        self._elapsed = Fraction(0)
        self._emitted = 0

    def advance(self, cycles: int) -> SimTime:
        """Advance by ``cycles`` and return the integer-ps delta to schedule."""
        self._elapsed += cycles * self.domain.period_ps
        target = math.floor(self._elapsed)
        delta = target - self._emitted
        self._emitted = target
        return delta


# ---------------------------------------------------------------------------
# Random numbers: xoshiro256** with splitmix64 seeding, one generator per
# named stream so adding a consumer never perturbs another stream's draws.
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** 1.0 (Blackman/Vigna), 64-bit output."""

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            state, out = _splitmix64(state)
            s.append(out)
        if not any(s):  # all-zero state is the one forbidden fixed point
            s[0] = 1
        self._s = s

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

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) with rejection (no modulo bias)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = _MASK64 - (_MASK64 + 1) % bound
        while True:
            x = self.next_u64()
            if x <= limit:
                return x % bound

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + self.below(hi - lo + 1)

    def choice(self, seq):
        return seq[self.below(len(seq))]

    def shuffle(self, seq: list) -> None:
        for i in range(len(seq) - 1, 0, -1):
            j = self.below(i + 1)
            seq[i], seq[j] = seq[j], seq[i]


def stream_rng(master_seed: int, stream_name: str) -> Xoshiro256StarStar:
    """Derive the per-stream generator: splitmix over (seed, FNV-1a(name))."""
    mix = (master_seed & _MASK64) ^ _fnv1a64(stream_name.encode("utf-8"))
    return Xoshiro256StarStar(mix)


# ---------------------------------------------------------------------------
# Event kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    fire_at: SimTime
    seq: int
    target: int
    payload: Any


class Kernel:
    """Single-threaded discrete-event kernel.

    Handlers are registered once and addressed by integer id; ``schedule``
    queues a payload for a target after a non-negative delay. ``call`` is
    sugar that registers a callable on first use. Handlers run to completion;
    there is no preemption.
    """

    def __init__(self, max_events: int = 10**10):
        self._heap: list[tuple[SimTime, int, int, Any]] = []
        self._handlers: list[Callable[[Any], None]] = []
        self._callable_ids: dict[Any, int] = {}
        self._seq = 0
        self._delivered = 0
        self.max_events = max_events
        self.now: SimTime = 0

    def register(self, handler: Callable[[Any], None]) -> int:
        self._handlers.append(handler)
        return len(self._handlers) - 1

    def schedule(self, target: int, payload: Any, delay: SimTime) -> int:
        if delay < 0:
            raise ValueError("negative delay")
        if not 0 <= target < len(self._handlers):
            raise ValueError(f"unknown target id {target}")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, (self.now + delay, seq, target, payload))
        return seq

    def call(self, delay: SimTime, fn: Callable, *args) -> int:
        """Schedule ``fn(*args)`` after ``delay``."""
        target = self._callable_ids.get(fn)
        if target is None:
            target = self.register(lambda payload, _fn=fn: _fn(*payload))
            self._callable_ids[fn] = target
        return self.schedule(target, args, delay)

    def run(self, until: Optional[SimTime] = None) -> SimTime:
        """Deliver events until the queue drains (or past ``until``).

        Returns the timestamp of the last delivered event. The kernel may
        be run again after new work is scheduled; time never moves backwards.
        """
        last = self.now
        while self._heap:
            fire_at, seq, target, payload = self._heap[0]
            if until is not None and fire_at > until:
                break
            heapq.heappop(self._heap)
            self._delivered += 1
            if self._delivered > self.max_events:
                raise EventLimitExceeded(
                    f"delivered more than {self.max_events} events")
            self.now = fire_at
            last = fire_at
            self._handlers[target](payload)
        return last

    @property
    def delivered(self) -> int:
        return self._delivered


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


class StatSeries:
    """A named series of samples with nearest-rank percentiles.

    Percentile rule: for p in (0, 1], take the sample at 1-indexed rank
    ceil(p*n) of the sorted series; p=0 maps to rank 1. No interpolation, so
    every reported percentile is a value that actually occurred.
    """

    def __init__(self, name: str, unit: str, samples: Optional[Iterable] = None):
        self.name = name
        self.unit = unit
        self.samples: list = list(samples) if samples is not None else []

    def add(self, value) -> None:
        self.samples.append(value)

    @property
    def n(self) -> int:
        return len(self.samples)

    def percentile(self, p) -> Any:
        if not self.samples:
            raise ValueError(f"percentile of empty series {self.name!r}")
        if not 0 <= p <= 1:
            raise ValueError("p must be within [0, 1]")
        ordered = sorted(self.samples)
        rank = max(1, math.ceil(p * len(ordered)))
        return ordered[rank - 1]

    def median(self):
        return self.percentile(0.5)

    def mean(self) -> float:
        if not self.samples:
            raise ValueError(f"mean of empty series {self.name!r}")
        return statistics.fmean(self.samples)

    def stddev(self) -> float:
        """Population standard deviation (0.0 for a single sample)."""
        if not self.samples:
            raise ValueError(f"stddev of empty series {self.name!r}")
        return statistics.pstdev(self.samples)

    def __repr__(self) -> str:
        return f"StatSeries({self.name!r}, n={self.n}, unit={self.unit!r})"
