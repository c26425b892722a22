"""Workload generators: calibration traces, atomic access patterns, and
synthetic RPC benches over the wire-format codec.

Everything here is a pure, seeded generator: identical parameters produce
identical streams, and each stream owns its own random-number generator so
experiments can generate in parallel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .engine import Xoshiro256StarStar, stream_rng
from .coherence import LINE
from .protowire import Field, Message, MessageSchema
from .rao import RaoRequest

__all__ = [
    "LsuTrace", "gen_lsu",
    "CircusPattern", "CircusStream", "CIRCUS_KINDS", "gen_circustent",
    "RPC_BENCHES", "RPC_MIX_WEIGHTS", "bench_schema", "gen_rpc_bench",
    "gen_rpc_mix", "dump_requests",
]


# ---------------------------------------------------------------------------
# Load/store calibration traces
# ---------------------------------------------------------------------------

LATENCY_LINES = 32
LATENCY_TRIALS = 1000
BANDWIDTH_LINES = 2048


@dataclass(frozen=True)
class LsuTrace:
    """Device load trace with per-trial warm-up placement.

    ``latency`` mode: 32 sequential lines, repeated over many warmed trials,
    one latency sample per access. ``bandwidth`` mode: one 2048-line
    (128 KB) stream issued back to back.
    """
    tier: str               # HMC | LLC | MEM
    mode: str               # latency | bandwidth
    node: int               # NUMA node for memory-tier service
    lines: tuple[int, ...]
    trials: int
    base: int = 0

    @property
    def warm_in(self) -> Optional[str]:
        # HMC warmth comes from repeating the addresses; the first pass
        # (a warm-up trial) fills the device cache
        return None if self.tier == "HMC" else self.tier


def gen_lsu(tier: str, mode: str = "latency", node: int = 7,
            base: int = 0x100000) -> LsuTrace:
    if tier not in ("HMC", "LLC", "MEM"):
        raise ValueError(f"unknown tier {tier!r}")
    if mode == "latency":
        n, trials = LATENCY_LINES, LATENCY_TRIALS
    elif mode == "bandwidth":
        n, trials = BANDWIDTH_LINES, 1
    else:
        raise ValueError(f"unknown mode {mode!r}")
    lines = tuple(base + i * LINE for i in range(n))
    return LsuTrace(tier, mode, node, lines, trials, base)


# ---------------------------------------------------------------------------
# Atomic access patterns
# ---------------------------------------------------------------------------

CIRCUS_KINDS = ("CENTRAL", "STRIDE1", "SCATTER", "GATHER", "SG", "RAND")


@dataclass(frozen=True)
class CircusPattern:
    kind: str
    n_ops: int
    region_base: int = 0
    region_bytes: int = 1 << 30
    seed: int = 1

    def __post_init__(self):
        if self.kind not in CIRCUS_KINDS:
            raise ValueError(f"unknown pattern {self.kind!r}")
        if self.n_ops < 1 or self.region_bytes < 64:
            raise ValueError("need n_ops >= 1 and a region of at least 64 B")


@dataclass
class CircusStream:
    """Resolved op stream plus the memory image its indirection reads.

    ``index_reads[i]`` is the address of the 8-byte index element the device
    must read before executing ``requests[i]`` (None when the pattern needs
    no indirection). ``image`` holds the seeded index arrays to install in
    memory so those reads return the values the targets were derived from.
    """
    pattern: CircusPattern
    requests: list[RaoRequest]
    index_reads: list[Optional[int]]
    image: list[tuple[int, bytes]] = field(default_factory=list)


def _index_array(rng: Xoshiro256StarStar, n: int, n_elems: int) -> list[int]:
    return [rng.below(n_elems) for _ in range(n)]


def gen_circustent(pattern: CircusPattern) -> CircusStream:
    rng = stream_rng(pattern.seed, f"circus-{pattern.kind}")
    base, n = pattern.region_base, pattern.n_ops
    n_elems = pattern.region_bytes // 8
    faa = lambda target: RaoRequest("FAA", target, operand_a=1)
    index_reads: list[Optional[int]] = [None] * n
    image: list[tuple[int, bytes]] = []

    if pattern.kind == "CENTRAL":
        requests = [faa(base) for _ in range(n)]
    elif pattern.kind == "STRIDE1":
        requests = [faa(base + (i % n_elems) * 8) for i in range(n)]
    elif pattern.kind == "RAND":
        requests = [faa(base + rng.below(n_elems) * 8) for _ in range(n)]
    else:
        # index arrays live above the target region, 8 B per element
        idx_base = base + pattern.region_bytes
        if pattern.kind in ("SCATTER", "GATHER"):
            idx = _index_array(rng, n, n_elems)
            image.append((idx_base, struct.pack(f"<{n}Q", *idx)))
            requests = [faa(base + idx[i] * 8) for i in range(n)]
            index_reads = [idx_base + 8 * i for i in range(n)]
        else:  # SG: alternating gather/scatter pairs, one array each
            half = (n + 1) // 2
            gather_idx = _index_array(rng, half, n_elems)
            scatter_idx = _index_array(rng, half, n_elems)
            image.append((idx_base, struct.pack(f"<{half}Q", *gather_idx)))
            sc_base = idx_base + 8 * half
            image.append((sc_base, struct.pack(f"<{half}Q", *scatter_idx)))
            requests, index_reads = [], []
            for i in range(n):
                j = i // 2
                if i % 2 == 0:
                    requests.append(faa(base + gather_idx[j] * 8))
                    index_reads.append(idx_base + 8 * j)
                else:
                    requests.append(faa(base + scatter_idx[j] * 8))
                    index_reads.append(sc_base + 8 * j)
    return CircusStream(pattern, requests, index_reads, image)


def dump_requests(stream: CircusStream) -> str:
    """One record per line: kind, target hex, size, operands."""
    out = []
    for req, idx in zip(stream.requests, stream.index_reads):
        via = f" via {idx:#x}" if idx is not None else ""
        out.append(f"{req.op} {req.target:#x} 8 "
                   f"{req.operand_a} {req.operand_b}{via}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Synthetic RPC benches
# ---------------------------------------------------------------------------

RPC_BENCHES = (1, 2, 3, 4, 5, 6)

# message mix when benches are pooled into one population; bench 1's tiny
# messages dominate the size distribution
RPC_MIX_WEIGHTS = {1: 0.40, 2: 0.15, 3: 0.15, 4: 0.15, 5: 0.05, 6: 0.10}

_MAX_B2_DEPTH = 12


def _scalar_fields(n: int, start: int = 1) -> list[Field]:
    return [Field(start + i, "uint") for i in range(n)]


def _chain_schema(depth: int) -> MessageSchema:
    inner = MessageSchema("level0", _scalar_fields(2))
    for d in range(1, depth):
        inner = MessageSchema(
            f"level{d}", _scalar_fields(2) + [Field(3, "msg", inner)])
    return inner


_B2_CHAIN = _chain_schema(_MAX_B2_DEPTH)

_SCHEMAS = {
    1: MessageSchema("small-scalars", _scalar_fields(14)),
    2: _B2_CHAIN,
    3: MessageSchema("mixed-short", _scalar_fields(4) + [
        Field(5, "bytes"), Field(6, "bytes"),
        Field(7, "msg", MessageSchema("leaf3", _scalar_fields(3))),
    ]),
    4: MessageSchema("mixed-mid", _scalar_fields(3) + [
        Field(4, "bytes"), Field(5, "bytes"), Field(6, "bytes"),
        Field(7, "msg", MessageSchema("leaf4", _scalar_fields(2) + [
            Field(3, "bytes")])),
    ]),
    5: MessageSchema("large-strings", [
        Field(1, "uint"), Field(2, "uint"),
        Field(3, "bytes"), Field(4, "bytes"),
    ]),
    6: MessageSchema("mixed-wide", _scalar_fields(6) + [
        Field(7, "bytes"),
        Field(8, "msg", MessageSchema("leaf6", _scalar_fields(4))),
    ]),
}


def bench_schema(bench: int) -> MessageSchema:
    return _SCHEMAS[bench]


def _rand_bytes(rng: Xoshiro256StarStar, n: int) -> bytes:
    out = bytearray()
    while len(out) < n:
        out += struct.pack("<Q", rng.next_u64())
    return bytes(out[:n])


def _small(rng: Xoshiro256StarStar) -> int:
    """Varint values biased to one encoded byte."""
    return rng.below(120) if rng.below(10) < 8 else rng.below(1 << 14)


def _gen_b1(rng, i) -> Message:
    k = rng.randint(6, 13)
    return [(f, _small(rng)) for f in range(1, k + 1)]


def _gen_b2(rng, i) -> Message:
    depth = 8 + i % 5  # deterministic sweep; maximum depth 12 always occurs
    msg: Message = [(1, _small(rng)), (2, _small(rng))]
    for _ in range(depth - 1):
        msg = [(1, _small(rng)), (2, _small(rng)), (3, msg)]
    return msg


def _gen_mixed(rng, schema, tiny_frac_pct, short_lo, short_hi) -> Message:
    scalars = [n for n, f in schema.fields.items() if f.kind == "uint"]
    if rng.below(100) < tiny_frac_pct:  # tiny message: a few scalars only
        k = rng.randint(2, min(4, len(scalars)))
        return [(n, _small(rng)) for n in scalars[:k]]
    msg: Message = [(n, _small(rng)) for n in scalars]
    for n, f in schema.fields.items():
        if f.kind == "bytes":
            msg.append((n, _rand_bytes(rng, rng.randint(short_lo, short_hi))))
        elif f.kind == "msg":
            inner = [(m, _small(rng)) for m, g in f.schema.fields.items()
                     if g.kind == "uint"]
            for m, g in f.schema.fields.items():
                if g.kind == "bytes":
                    inner.append((m, _rand_bytes(rng,
                                                 rng.randint(short_lo,
                                                             short_hi))))
            msg.append((n, inner))
    return msg


def _gen_b5(rng, i) -> Message:
    msg: Message = [(1, _small(rng)), (2, _small(rng))]
    msg.append((3, _rand_bytes(rng, rng.randint(1024, 3100))))
    if rng.below(2):
        msg.append((4, _rand_bytes(rng, rng.randint(128, 700))))
    return msg


def _gen_message(bench: int, rng, i: int) -> Message:
    if bench == 1:
        return _gen_b1(rng, i)
    if bench == 2:
        return _gen_b2(rng, i)
    if bench == 3:
        return _gen_mixed(rng, _SCHEMAS[3], 40, 20, 80)
    if bench == 4:
        return _gen_mixed(rng, _SCHEMAS[4], 40, 40, 160)
    if bench == 5:
        return _gen_b5(rng, i)
    if bench == 6:
        return _gen_mixed(rng, _SCHEMAS[6], 40, 30, 120)
    raise ValueError(f"unknown bench {bench}")


def gen_rpc_bench(bench: int, n_messages: int,
                  seed: int = 1) -> list[tuple[MessageSchema, Message]]:
    """Messages for one bench profile; values and shapes are seeded."""
    if bench not in RPC_BENCHES:
        raise ValueError(f"unknown bench {bench}")
    rng = stream_rng(seed, f"rpc-bench-{bench}")
    schema = _SCHEMAS[bench]
    return [(schema, _gen_message(bench, rng, i)) for i in range(n_messages)]


def gen_rpc_mix(n_messages: int,
                seed: int = 1) -> list[tuple[MessageSchema, Message]]:
    """Pooled message population drawn across benches by the mix weights."""
    rng = stream_rng(seed, "rpc-mix")
    benches = sorted(RPC_MIX_WEIGHTS)
    cum = []
    acc = 0.0
    for b in benches:
        acc += RPC_MIX_WEIGHTS[b]
        cum.append((b, acc))
    out = []
    counters = {b: 0 for b in benches}
    for _ in range(n_messages):
        u = rng.below(10_000) / 10_000
        bench = next(b for b, edge in cum if u < edge or edge >= acc)
        out.append((_SCHEMAS[bench],
                    _gen_message(bench, rng, counters[bench])))
        counters[bench] += 1
    return out
