"""Miss-triggered multi-stride prefetcher for the device cache.

The prefetcher watches the demand-miss address stream, detects per-stream
constant strides (in cacheline units, negative strides included), and once a
stream is confident it runs ``degree`` lines ahead. A hit on a previously
prefetched line re-arms the stream, so a steady stream keeps its lead without
further misses.

Table entries are replaced LRU. Trained matches tolerate gaps of up to
``degree + 1`` strides so a stream whose prefetches covered the intermediate
lines still advances on its next miss.

Issued addresses are always line-aligned and below the device-memory window;
whether a prefetch may displace a locked line is enforced by the cache fill
path, which never victimizes locked or in-flight lines.
"""

from __future__ import annotations

from dataclasses import dataclass

from .coherence import DEVICE_BASE, LINE

__all__ = ["MultiStridePrefetcher"]


@dataclass
class _Stream:
    last: int           # line number of the most recent access in the stream
    stride: int = 0     # lines per step; 0 = seen once, stride unknown
    confidence: int = 0  # 2-bit saturating counter; >= threshold issues
    tick: int = 0       # LRU stamp


class MultiStridePrefetcher:
    """Stride table with 2-bit confidence and configurable degree."""

    def __init__(self, *, table_size: int = 16, degree: int = 2,
                 max_stride: int = 64, threshold: int = 2):
        if table_size < 1 or degree < 1 or max_stride < 1:
            raise ValueError("table_size, degree and max_stride must be >= 1")
        if not 1 <= threshold <= 3:
            raise ValueError("threshold must fit the 2-bit counter")
        self.table_size = table_size
        self.degree = degree
        self.max_stride = max_stride
        self.threshold = threshold
        self._streams: list[_Stream] = []
        self._tick = 0
        self.issued: int = 0

    # -- event hooks (wired to the device cache) -----------------------------

    def on_demand_miss(self, line_addr: int) -> list[int]:
        """Record a demand miss; return line addresses to prefetch."""
        return self._advance(line_addr // LINE, allocate=True)

    def on_prefetch_hit(self, line_addr: int) -> list[int]:
        """First demand hit on a prefetched line extends its stream."""
        return self._advance(line_addr // LINE, allocate=False)

    # -- internals ------------------------------------------------------------

    def _advance(self, line: int, allocate: bool) -> list[int]:
        self._tick += 1
        # 1. continuation of a trained stream, up to degree+1 strides ahead
        for s in self._streams:
            if s.stride == 0:
                continue
            delta = line - s.last
            if delta == 0 or delta % s.stride != 0:
                continue
            steps = delta // s.stride
            if 1 <= steps <= self.degree + 1:
                s.last = line
                s.confidence = min(3, s.confidence + 1)
                s.tick = self._tick
                if s.confidence >= self.threshold:
                    return self._emit(line, s.stride)
                return []
        # 2. second touch of a one-shot entry establishes its stride
        for s in self._streams:
            if s.stride != 0:
                continue
            delta = line - s.last
            if delta != 0 and abs(delta) <= self.max_stride:
                s.stride = delta
                s.last = line
                s.confidence = 1
                s.tick = self._tick
                if s.confidence >= self.threshold:
                    return self._emit(line, s.stride)
                return []
        if not allocate:
            return []
        # 3. start a new stream, displacing the least recently used entry
        if len(self._streams) >= self.table_size:
            lru = min(self._streams, key=lambda s: s.tick)
            self._streams.remove(lru)
        self._streams.append(_Stream(last=line, tick=self._tick))
        return []

    def _emit(self, line: int, stride: int) -> list[int]:
        out = []
        for k in range(1, self.degree + 1):
            nxt = line + k * stride
            if 0 <= nxt * LINE < DEVICE_BASE:
                out.append(nxt * LINE)
        self.issued += len(out)
        return out
