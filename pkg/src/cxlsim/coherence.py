"""Two-level directory coherence between host cores, LLC and a device cache.

Topology: N host cores with private L1s and an inclusive LLC (directory
embedded: owner + sharer set per line) on one side; a coherent device agent
(DCOH) with a small set-associative device cache (HMC) on the other, joined
by a link with credit-limited device-to-host requests.

Protocol shape:
  * Device read miss -> RdShared/RdOwn on D2H-Req; host answers Data then a
    Go carrying the granted state on H2D-Resp. Exactly one Go-class message
    completes every D2H request (GoWritePull is a pull, not a completion).
  * Host access to a device-held line -> SnpData/SnpInv on H2D-Req, the
    device answers WritebackData (data only if it held the line dirty).
  * Device evictions: CleanEvict -> GoInvalidate;
    DirtyEvict -> GoWritePull -> WritebackData -> GoInvalidate.
  * NCPush (non-coherent push) installs a full line dirty in the LLC and
    invalidates every cached copy, without gaining device ownership.
  * Stores upgrade E to M silently. The directory is blocking: one in-flight
    transaction per line, later requests queue FIFO behind it.

Lines locked by the device's atomic engine are never chosen as victims; a
snoop that targets a locked line the device holds in M or E stalls until
unlock. (A locked line held in S or still in flight carries no value
authority, so invalidating it is safe and avoids a lock/directory deadlock.)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from cxlsim.engine import Kernel, SimTime
from cxlsim.interconnect import CxlLink, LatencyConfig

LINE = 64
DEVICE_BASE = 1 << 40  # addresses at or above this live in device memory

M, E, S = "M", "E", "S"
GO_CLASS = ("Go", "GoInvalidate")


def line_of(addr: int) -> int:
    return addr & ~(LINE - 1)


# ---------------------------------------------------------------------------
# Storage
# ---------------------------------------------------------------------------


class MainMemory:
    """Byte-addressable backing store, lazily zero-filled, line-granular."""

    def __init__(self):
        self._lines: dict[int, bytearray] = {}

    def _line(self, line: int) -> bytearray:
        buf = self._lines.get(line)
        if buf is None:
            buf = self._lines[line] = bytearray(LINE)
        return buf

    def read_line(self, line: int) -> bytes:
        return bytes(self._line(line))

    def write_line(self, line: int, data: bytes) -> None:
        assert len(data) == LINE
        self._line(line)[:] = data

    def read(self, addr: int, size: int) -> bytes:
        out = bytearray()
        while size:
            line = line_of(addr)
            off = addr - line
            take = min(size, LINE - off)
            out += self._line(line)[off:off + take]
            addr += take
            size -= take
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            line = line_of(addr + pos)
            off = addr + pos - line
            take = min(len(data) - pos, LINE - off)
            self._line(line)[off:off + take] = data[pos:pos + take]
            pos += take


@dataclass
class CacheLine:
    line: int
    state: str
    data: bytearray
    prefetched: bool = False


class SetAssocCache:
    """Set-associative cache with per-set LRU; sets must be a power of two."""

    def __init__(self, name: str, size_bytes: int, ways: int):
        sets = size_bytes // (ways * LINE)
        if sets <= 0 or sets & (sets - 1):
            raise ValueError(f"{name}: set count {sets} is not a power of two")
        self.name = name
        self.ways = ways
        self.sets = sets
        self._sets: list[list[CacheLine]] = [[] for _ in range(sets)]

    def set_index(self, line: int) -> int:
        return (line // LINE) & (self.sets - 1)

    def lookup(self, line: int) -> Optional[CacheLine]:
        for entry in self._sets[self.set_index(line)]:
            if entry.line == line:
                return entry
        return None

    def touch(self, line: int) -> None:
        bucket = self._sets[self.set_index(line)]
        for i, entry in enumerate(bucket):
            if entry.line == line:
                bucket.append(bucket.pop(i))  # tail = most recent
                return

    def pick_victim(self, line: int,
                    locked: Callable[[int], bool]) -> Optional[CacheLine]:
        """LRU entry of the target set, skipping locked lines.

        Returns None either when there is still room or when every way is
        locked (caller must retry after an unlock).
        """
        bucket = self._sets[self.set_index(line)]
        if len(bucket) < self.ways:
            return None
        for entry in bucket:  # head = least recent
            if not locked(entry.line):
                return entry
        return None

    def room_for(self, line: int) -> bool:
        return len(self._sets[self.set_index(line)]) < self.ways

    def insert(self, entry: CacheLine) -> None:
        bucket = self._sets[self.set_index(entry.line)]
        assert len(bucket) < self.ways, "insert without eviction"
        bucket.append(entry)

    def remove(self, line: int) -> Optional[CacheLine]:
        bucket = self._sets[self.set_index(line)]
        for i, entry in enumerate(bucket):
            if entry.line == line:
                return bucket.pop(i)
        return None

    def entries(self):
        for bucket in self._sets:
            yield from bucket


# ---------------------------------------------------------------------------
# Messages and logs
# ---------------------------------------------------------------------------


@dataclass
class Msg:
    channel: str      # D2H-Req | D2H-Resp | H2D-Req | H2D-Resp
    opcode: str
    line: int
    req_id: int
    src: str
    data: Optional[bytes] = None
    state: Optional[str] = None   # granted state on Go
    tier: Optional[str] = None    # HMC/LLC/MEM service tier, for stats


class MessageLog:
    """Every link message with its send tick; feeds traces and invariants."""

    def __init__(self):
        self.records: list[tuple[SimTime, Msg]] = []

    def log(self, tick: SimTime, msg: Msg) -> None:
        self.records.append((tick, msg))

    def by_opcode(self, opcode: str):
        return [(t, m) for t, m in self.records if m.opcode == opcode]

    def d2h_request_ids(self) -> list[int]:
        return [m.req_id for _, m in self.records if m.channel == "D2H-Req"]

    def go_response_ids(self) -> list[int]:
        return [m.req_id for _, m in self.records
                if m.channel == "H2D-Resp" and m.opcode in GO_CLASS]

    def trace_lines(self):
        for tick, m in self.records:
            yield (f"{tick}\t{m.channel}\t{m.opcode}\t{m.line:#x}\t"
                   f"{m.src}\t{int(m.data is not None)}")


class CommitLog:
    """Ordered record of value-bearing accesses for the data-value oracle."""

    def __init__(self):
        self.records: list[tuple[str, str, int, bytes]] = []
        self.enabled = True

    def read(self, agent: str, addr: int, data: bytes) -> None:
        if self.enabled:
            self.records.append((agent, "r", addr, bytes(data)))

    def write(self, agent: str, addr: int, data: bytes) -> None:
        if self.enabled:
            self.records.append((agent, "w", addr, bytes(data)))


def replay_commits(commits: CommitLog,
                   initial: Optional[dict[int, bytes]] = None) -> int:
    """Replay the commit log against flat memory; every read must match.

    Returns the number of reads checked. Raises AssertionError on the first
    read that observed a value other than the latest committed write.
    """
    mem = MainMemory()
    for line, data in (initial or {}).items():
        mem.write_line(line, data)
    checked = 0
    for agent, kind, addr, data in commits.records:
        if kind == "w":
            mem.write(addr, data)
        else:
            expect = mem.read(addr, len(data))
            assert data == expect, (
                f"{agent} read {data.hex()} at {addr:#x}, "
                f"expected {expect.hex()}")
            checked += 1
    return checked


# ---------------------------------------------------------------------------
# Small synchronization helpers
# ---------------------------------------------------------------------------


class SerialPort:
    """FIFO mutual exclusion; grant runs synchronously when free."""

    def __init__(self):
        self._busy = False
        self._queue: list[Callable[[], None]] = []

    @property
    def busy(self) -> bool:
        return self._busy

    def acquire(self, fn: Callable[[], None]) -> None:
        if self._busy:
            self._queue.append(fn)
        else:
            self._busy = True
            fn()

    def release(self) -> None:
        assert self._busy
        if self._queue:
            self._queue.pop(0)()
        else:
            self._busy = False


class LockTable:
    """Per-line FIFO locks for the atomic engine; snoops queue here too."""

    def __init__(self):
        self._locks: dict[int, list[Callable[[], None]]] = {}
        self._on_release: list[Callable[[], None]] = []

    def locked(self, line: int) -> bool:
        return line in self._locks

    def acquire(self, line: int, fn: Callable[[], None]) -> None:
        if line in self._locks:
            self._locks[line].append(fn)
        else:
            self._locks[line] = []
            fn()

    def release(self, line: int) -> None:
        waiters = self._locks[line]
        if waiters:
            waiters.pop(0)()  # lock passes to the next waiter
        else:
            del self._locks[line]
            hooks, self._on_release = self._on_release, []
            for hook in hooks:
                hook()

    def notify_next_release(self, fn: Callable[[], None]) -> None:
        self._on_release.append(fn)


# ---------------------------------------------------------------------------
# Host node: cores, L1s, LLC + directory, memory interface
# ---------------------------------------------------------------------------


@dataclass
class LlcLine:
    has_data: bool = False
    dirty: bool = False
    data: Optional[bytearray] = None
    owner: Optional[str] = None        # agent holding M/E
    sharers: list = field(default_factory=list)
    busy: bool = False                 # blocking-directory MSHR
    queue: list = field(default_factory=list)


class HostNode:
    """Host cores, inclusive LLC with embedded directory, DRAM interface."""

    def __init__(self, kernel: Kernel, cfg: LatencyConfig, mem: MainMemory,
                 msg_log: MessageLog, commits: CommitLog, *, n_cores: int = 2,
                 l1_bytes: int = 32 * 1024, l1_ways: int = 8,
                 check_invariants: bool = False):
        self.kernel = kernel
        self.cfg = cfg
        self.mem = mem
        self.msg_log = msg_log
        self.commits = commits
        self.check_invariants = check_invariants
        self.l1 = [SetAssocCache(f"L1:{k}", l1_bytes, l1_ways)
                   for k in range(n_cores)]
        self.llc: dict[int, LlcLine] = {}
        self.mem_node = 7
        self.device: "DeviceNode | None" = None
        self.link: CxlLink | None = None
        self._llc_busy: SimTime = 0
        self._mem_busy: SimTime = 0
        self._pending_snoops: dict[int, Callable] = {}
        self._req_seq = 0

    # --- resources ---------------------------------------------------------

    def _reserve_llc(self) -> SimTime:
        start = max(self.kernel.now, self._llc_busy)
        self._llc_busy = start + self.cfg.t_llc_occupancy
        return start

    def _reserve_mem(self, earliest: SimTime) -> SimTime:
        start = max(earliest, self._mem_busy)
        self._mem_busy = start + self.cfg.t_mem_occupancy
        return start

    # --- blocking directory --------------------------------------------------

    def _entry(self, line: int) -> LlcLine:
        e = self.llc.get(line)
        if e is None:
            e = self.llc[line] = LlcLine()
        return e

    def _with_line(self, line: int, fn: Callable[[], None]) -> None:
        e = self._entry(line)
        if e.busy:
            e.queue.append(fn)
        else:
            e.busy = True
            fn()

    def _done_line(self, line: int) -> None:
        e = self.llc[line]
        assert e.busy
        if e.queue:
            e.queue.pop(0)()
        else:
            e.busy = False
        if self.check_invariants:
            self.audit_line(line)

    # --- link plumbing -------------------------------------------------------

    def _send_h2d(self, msg: Msg) -> None:
        self.msg_log.log(self.kernel.now, msg)
        self.link.send_h2d(self.device.on_h2d, msg)

    def next_req_id(self) -> int:
        self._req_seq += 1
        return self._req_seq

    # --- D2H service ----------------------------------------------------------

    def on_d2h(self, msg: Msg) -> None:
        if msg.channel == "D2H-Resp":  # writeback for a pending device snoop
            cont = self._pending_snoops.pop(msg.req_id)
            cont(msg)
            return
        self._with_line(msg.line, lambda: self._serve_d2h(msg))

    def _serve_d2h(self, msg: Msg) -> None:
        op = msg.opcode
        if op in ("RdShared", "RdOwn"):
            self._serve_read(msg)
        elif op == "CleanEvict":
            self._serve_clean_evict(msg)
        elif op == "DirtyEvict":
            self._serve_dirty_evict(msg)
        elif op == "NCPush":
            self._serve_ncpush(msg)
        else:
            raise AssertionError(f"unexpected D2H opcode {op}")

    def _serve_read(self, msg: Msg) -> None:
        """RdShared/RdOwn from the device; respond Data then Go."""
        e = self._entry(msg.line)
        # A re-fetch can overtake the device's own in-flight CleanEvict;
        # treat the stale presence bits as already cleared.
        if e.owner == msg.src:
            e.owner = None
        if msg.src in e.sharers:
            e.sharers.remove(msg.src)

        llc_start = self._reserve_llc()
        resp_at = llc_start + self.cfg.t_llc_service
        snoop_l1 = [a for a in ([e.owner] if e.owner else []) + list(e.sharers)
                    if a.startswith("L1:")]
        if msg.opcode == "RdShared" and not e.owner:
            snoop_l1 = []  # S sharers may keep their copies on a shared read
        if snoop_l1:
            resp_at += self.cfg.t_host_llc  # round trip to the core caches
        need_mem = not e.has_data and not (e.owner and e.owner.startswith("L1:"))
        tier = "LLC"
        if need_mem:
            mem_start = self._reserve_mem(resp_at)
            resp_at = mem_start + self.cfg.mem_latency(self.mem_node)
            tier = "MEM"
        self.kernel.call(resp_at - self.kernel.now,
                         self._finish_read, msg, snoop_l1, need_mem, tier)

    def _finish_read(self, msg: Msg, snoop_l1: list, need_mem: bool,
                     tier: str) -> None:
        e = self.llc[msg.line]
        data: Optional[bytes] = None
        for agent in snoop_l1:
            core = int(agent.split(":")[1])
            entry = self.l1[core].lookup(msg.line)
            if entry is not None:
                if entry.state == M:
                    data = bytes(entry.data)
                if msg.opcode == "RdOwn":
                    self.l1[core].remove(msg.line)
                else:
                    entry.state = S
            if msg.opcode == "RdOwn" or entry is None or entry.state != S:
                if agent == e.owner:
                    e.owner = None
                if agent in e.sharers:
                    e.sharers.remove(agent)
            elif agent == e.owner:  # downgraded M/E -> S on RdShared
                e.owner = None
                if agent not in e.sharers:
                    e.sharers.append(agent)
        if data is not None:
            # dirty writeback: LLC keeps it; memory refreshed on downgrade
            e.data = bytearray(data)
            e.has_data = True
            e.dirty = False
            self.mem.write_line(msg.line, data)
        if need_mem and not e.has_data:
            e.data = bytearray(self.mem.read_line(msg.line))
            e.has_data = True
            e.dirty = False
        payload = bytes(e.data) if e.has_data else self.mem.read_line(msg.line)

        if msg.opcode == "RdOwn":
            grant = E
            e.owner = msg.src
            e.sharers = []
            # ownership moves out; drop the LLC copy so it can never go stale.
            # Dirty data must reach DRAM first: the grantee starts in E and an
            # eventual CleanEvict would otherwise lose the only valid copy.
            if e.has_data and e.dirty:
                self.mem.write_line(msg.line, bytes(e.data))
            e.has_data = False
            e.dirty = False
            e.data = None
        else:
            grant = E if (not e.owner and not e.sharers) else S
            if grant == E:
                e.owner = msg.src
            elif msg.src not in e.sharers:
                e.sharers.append(msg.src)
        self._send_h2d(Msg("H2D-Resp", "Data", msg.line, msg.req_id, "LLC",
                           data=payload, tier=tier))
        self._send_h2d(Msg("H2D-Resp", "Go", msg.line, msg.req_id, "LLC",
                           state=grant, tier=tier))
        self._done_line(msg.line)

    def _serve_clean_evict(self, msg: Msg) -> None:
        e = self._entry(msg.line)
        if e.owner == msg.src:
            e.owner = None
        if msg.src in e.sharers:
            e.sharers.remove(msg.src)
        self._send_h2d(Msg("H2D-Resp", "GoInvalidate", msg.line, msg.req_id,
                           "LLC"))
        self._done_line(msg.line)

    def _serve_dirty_evict(self, msg: Msg) -> None:
        def on_writeback(wb: Msg) -> None:
            e = self._entry(msg.line)
            llc_start = self._reserve_llc()
            if e.owner == msg.src:
                e.data = bytearray(wb.data)
                e.has_data = True
                e.dirty = True
                e.owner = None
            # else a snoop already pulled the buffered data and moved
            # ownership on: this writeback is superseded, drop it
            if msg.src in e.sharers:
                e.sharers.remove(msg.src)
            done_at = llc_start + self.cfg.t_llc_service
            self.kernel.call(done_at - self.kernel.now, self._finish_evict, msg)

        self._pending_snoops[msg.req_id] = on_writeback
        self._send_h2d(Msg("H2D-Resp", "GoWritePull", msg.line, msg.req_id,
                           "LLC"))

    def _finish_evict(self, msg: Msg) -> None:
        self._send_h2d(Msg("H2D-Resp", "GoInvalidate", msg.line, msg.req_id,
                           "LLC"))
        self._done_line(msg.line)

    def _serve_ncpush(self, msg: Msg) -> None:
        self._entry(msg.line)
        llc_start = self._reserve_llc()
        self.kernel.call(llc_start + self.cfg.t_llc_service - self.kernel.now,
                         self._finish_ncpush, msg)

    def _finish_ncpush(self, msg: Msg) -> None:
        e = self.llc[msg.line]
        for agent in list(e.sharers) + ([e.owner] if e.owner else []):
            if agent.startswith("L1:"):
                self.l1[int(agent.split(":")[1])].remove(msg.line)
        e.owner = None
        e.sharers = []
        e.data = bytearray(msg.data)
        e.has_data = True
        e.dirty = True  # newest copy lives in LLC, DRAM is stale
        self.commits.write("NCP", msg.line, msg.data)
        self._send_h2d(Msg("H2D-Resp", "Go", msg.line, msg.req_id, "LLC"))
        self._done_line(msg.line)

    # --- host core accesses -----------------------------------------------------

    def host_access(self, core: int, kind: str, addr: int, size: int = 8,
                    data: Optional[bytes] = None,
                    on_done: Optional[Callable[[SimTime], None]] = None) -> None:
        """Issue a core load/store; on_done fires at completion."""
        assert kind in ("load", "store")
        assert line_of(addr) == line_of(addr + size - 1), "single-line access"
        if addr >= DEVICE_BASE:
            self._device_range_access(core, kind, addr, size, data, on_done)
            return
        line = line_of(addr)
        cache = self.l1[core]
        entry = cache.lookup(line)
        issue = self.kernel.now
        if entry is not None and (kind == "load" or entry.state in (M, E)):
            cache.touch(line)
            off = addr - line
            if kind == "load":
                self.commits.read(f"L1:{core}", addr,
                                  bytes(entry.data[off:off + size]))
            else:
                entry.data[off:off + size] = data
                entry.state = M  # E->M silently, no messages
                self.commits.write(f"L1:{core}", addr, data)
            if on_done:
                self.kernel.call(self.cfg.t_host_l1, on_done, issue)
            return
        self._with_line(line,
                        lambda: self._core_fill(core, kind, addr, size, data,
                                                on_done, issue))

    def _core_fill(self, core, kind, addr, size, data, on_done, issue) -> None:
        line = line_of(addr)
        cache = self.l1[core]
        # late hit: an earlier transaction by this core (we were queued
        # behind it) may have already installed a sufficient copy
        entry = cache.lookup(line)
        if entry is not None and (kind == "load" or entry.state in (M, E)):
            cache.touch(line)
            off = addr - line
            if kind == "load":
                self.commits.read(f"L1:{core}", addr,
                                  bytes(entry.data[off:off + size]))
            else:
                entry.data[off:off + size] = data
                entry.state = M
                self.commits.write(f"L1:{core}", addr, data)
            self._done_line(line)
            if on_done:
                self.kernel.call(self.cfg.t_host_l1, on_done, issue)
            return
        e = self._entry(line)
        agent = f"L1:{core}"
        base = self.kernel.now + self.cfg.t_host_l1 + self.cfg.t_host_llc

        def proceed(wb: Optional[Msg]) -> None:
            self._finish_core_fill(core, kind, addr, size, data, on_done,
                                   issue, wb)

        if e.owner == "HMC" or (kind == "store" and "HMC" in e.sharers):
            op = "SnpData" if kind == "load" else "SnpInv"
            req_id = self.next_req_id()
            self._pending_snoops[req_id] = proceed
            self.kernel.call(base - self.kernel.now, self._send_h2d,
                             Msg("H2D-Req", op, line, req_id, agent))
        else:
            delay = base - self.kernel.now
            if not e.has_data and not e.owner:
                mem_start = self._reserve_mem(base)
                delay = (mem_start + self.cfg.mem_latency(self.mem_node)
                         - self.kernel.now)
            self.kernel.call(delay, proceed, None)

    def _finish_core_fill(self, core, kind, addr, size, data, on_done, issue,
                          wb: Optional[Msg]) -> None:
        line = line_of(addr)
        e = self.llc[line]
        agent = f"L1:{core}"
        if wb is not None:
            if wb.data is not None:
                e.data = bytearray(wb.data)
                e.has_data = True
                e.dirty = False
                self.mem.write_line(line, wb.data)
            if e.owner == "HMC":
                e.owner = None
            if "HMC" in e.sharers:
                e.sharers.remove("HMC")
            if kind == "load" and wb.state == S:  # device kept an S copy
                e.sharers.append("HMC")
        if (e.owner and e.owner.startswith("L1:") and e.owner != agent):
            # peer core holds M/E; pull its data and downgrade or invalidate
            peer = int(e.owner.split(":")[1])
            entry = self.l1[peer].lookup(line)
            if entry is not None and entry.state == M:
                e.data = bytearray(entry.data)
                e.has_data = True
                e.dirty = False
                self.mem.write_line(line, bytes(entry.data))
            if kind == "load":
                if entry is not None:
                    entry.state = S
                    e.sharers.append(e.owner)
                e.owner = None
            # store invalidation happens in the loop below
        if kind == "store":
            for other in [a for a in e.sharers + ([e.owner] if e.owner else [])
                          if a.startswith("L1:") and a != agent]:
                self.l1[int(other.split(":")[1])].remove(line)
                if other == e.owner:
                    e.owner = None
                if other in e.sharers:
                    e.sharers.remove(other)
        if not e.has_data:
            e.data = bytearray(self.mem.read_line(line))
            e.has_data = True
            e.dirty = False
        cache = self.l1[core]
        old = cache.lookup(line)
        if old is None:
            victim = cache.pick_victim(line, lambda _l: False)
            if victim is not None:
                self._l1_evict(core, victim)
                cache.remove(victim.line)
            filled = CacheLine(line, S, bytearray(e.data))
            cache.insert(filled)
        else:
            filled = old
            if filled.state == S:
                # refresh a shared copy on upgrade; never clobber M/E data
                filled.data = bytearray(e.data)
        cache.touch(line)
        off = addr - line
        if kind == "store":
            filled.state = M
            filled.data[off:off + size] = data
            e.owner = agent
            e.sharers = []
            # the core owns the only valid copy now
            e.has_data = False
            e.dirty = False
            e.data = None
            self.commits.write(agent, addr, data)
        else:
            if not e.owner and not e.sharers:
                filled.state = E
                e.owner = agent
            else:
                filled.state = S
                if agent not in e.sharers:
                    e.sharers.append(agent)
            self.commits.read(agent, addr, bytes(filled.data[off:off + size]))
        self._done_line(line)
        if on_done:
            on_done(issue)

    def _l1_evict(self, core: int, victim: CacheLine) -> None:
        """Synchronous L1 eviction; dirty data folds back into the LLC."""
        e = self._entry(victim.line)
        agent = f"L1:{core}"
        if victim.state == M:
            e.data = bytearray(victim.data)
            e.has_data = True
            e.dirty = True
        if e.owner == agent:
            e.owner = None
        if agent in e.sharers:
            e.sharers.remove(agent)

    def _device_range_access(self, core, kind, addr, size, data, on_done):
        """Uncached host access to device-attached memory (CXL.mem path)."""
        issue = self.kernel.now
        latency = (self.cfg.t_host_l1 + self.cfg.t_host_llc
                   + self.cfg.t_cxlmem_adder + self.cfg.t_dram)

        def finish():
            if kind == "store":
                self.mem.write(addr, data)
                self.commits.write(f"L1:{core}", addr, data)
            else:
                self.commits.read(f"L1:{core}", addr, self.mem.read(addr, size))
            if on_done:
                on_done(issue)

        self.kernel.call(latency, finish)

    # --- invariants -----------------------------------------------------------

    def holders(self, line: int) -> list[tuple[str, str]]:
        out = []
        for k, cache in enumerate(self.l1):
            entry = cache.lookup(line)
            if entry is not None:
                out.append((f"L1:{k}", entry.state))
        if self.device is not None:
            entry = self.device.hmc.lookup(line)
            if entry is not None:
                out.append(("HMC", entry.state))
        return out

    def audit_line(self, line: int) -> None:
        """Single-writer-multiple-reader check over actual cache contents."""
        holders = self.holders(line)
        exclusive = [h for h in holders if h[1] in (M, E)]
        assert len(exclusive) <= 1, f"two writers on {line:#x}: {holders}"
        if exclusive:
            assert len(holders) == 1, \
                f"writer plus sharers on {line:#x}: {holders}"

    def audit_directory(self) -> None:
        """At quiescence the directory must match cache contents exactly."""
        seen: dict[int, list] = {}
        for k, cache in enumerate(self.l1):
            for entry in cache.entries():
                seen.setdefault(entry.line, []).append((f"L1:{k}", entry.state))
        for entry in self.device.hmc.entries():
            seen.setdefault(entry.line, []).append(("HMC", entry.state))
        for line, holders in seen.items():
            e = self.llc.get(line)
            assert e is not None and not e.busy, f"untracked line {line:#x}"
            for agent, state in holders:
                if state in (M, E):
                    assert e.owner == agent, (
                        f"{line:#x}: owner {e.owner} != {agent} ({state})")
                else:
                    assert agent in e.sharers, (
                        f"{line:#x}: {agent} S-copy missing from directory")
        for line, e in self.llc.items():
            holders = dict(seen.get(line, []))
            if e.owner:
                assert e.owner in holders and holders[e.owner] in (M, E), (
                    f"{line:#x}: stale owner {e.owner}")
            for agent in e.sharers:
                assert agent in holders, f"{line:#x}: stale sharer {agent}"


# ---------------------------------------------------------------------------
# Device node: DCOH agent + device cache + fetch unit
# ---------------------------------------------------------------------------


@dataclass
class _Fetch:
    line: int
    want: str                   # S or E
    req_id: int = 0
    callbacks: list = field(default_factory=list)  # fn(tier)
    upgrade: bool = False       # an E-want arrived while S fetch in flight
    prefetch: bool = False
    data: Optional[bytes] = None


class DeviceNode:
    """Coherent device agent: device cache, fetch unit, locks, NC-P pushes."""

    def __init__(self, kernel: Kernel, cfg: LatencyConfig, mem: MainMemory,
                 msg_log: MessageLog, commits: CommitLog, *,
                 hmc_bytes: int = 128 * 1024, hmc_ways: int = 4,
                 check_invariants: bool = False):
        self.kernel = kernel
        self.cfg = cfg
        self.mem = mem
        self.msg_log = msg_log
        self.commits = commits
        self.check_invariants = check_invariants
        self.hmc = SetAssocCache("HMC", hmc_bytes, hmc_ways)
        self.locks = LockTable()
        self.rao_port = SerialPort()
        self.host: HostNode | None = None
        self.link: CxlLink | None = None
        self.prefetcher = None
        self._hmc_busy: SimTime = 0
        self._fetches: dict[int, _Fetch] = {}
        self._evicting: dict[int, dict] = {}  # line -> {data, waiters}
        self._push_waiters: dict[int, Optional[Callable[[], None]]] = {}
        self._pending_installs: list[tuple[_Fetch, Msg]] = []
        self._draining = False
        self._stat_hits = 0
        self._stat_misses = 0
        self._stat_prefetch_hits = 0

    # --- plumbing ------------------------------------------------------------

    def _send_d2h(self, msg: Msg, needs_credit: bool) -> None:
        self.msg_log.log(self.kernel.now, msg)
        self.link.send_d2h(self.host.on_d2h, msg, needs_credit)

    def _reserve_hmc(self) -> SimTime:
        start = max(self.kernel.now, self._hmc_busy)
        self._hmc_busy = start + self.cfg.t_hmc_occupancy
        return start

    # --- streaming loads/stores -----------------------------------------------

    def device_load(self, addr: int, size: int = LINE,
                    on_done: Optional[Callable[[str], None]] = None) -> None:
        """Pipelined coherent read; on_done receives the service tier."""
        assert line_of(addr) == line_of(addr + size - 1), "single-line access"
        start = self._reserve_hmc()
        self.kernel.call(start - self.kernel.now, self._lookup_load,
                         addr, size, on_done)

    def _lookup_load(self, addr: int, size: int, on_done) -> None:
        line = line_of(addr)
        entry = self.hmc.lookup(line)
        if entry is not None:
            self.hmc.touch(line)
            off = addr - line
            self._stat_hits += 1
            self.commits.read("HMC", addr, bytes(entry.data[off:off + size]))
            if entry.prefetched:
                entry.prefetched = False
                self._stat_prefetch_hits += 1
                if self.prefetcher is not None:  # keep the stream ahead
                    for pline in self.prefetcher.on_prefetch_hit(line):
                        self.prefetch_fill(pline)
            if on_done:
                self.kernel.call(self.cfg.t_hmc_hit, on_done, "HMC")
            return
        self._stat_misses += 1

        def filled(tier: str) -> None:
            got = self.hmc.lookup(line)
            off = addr - line
            self.commits.read("HMC", addr, bytes(got.data[off:off + size]))
            if on_done:
                on_done(tier)

        self.fetch(line, S, filled)
        if self.prefetcher is not None:  # after the demand miss is in flight
            for pline in self.prefetcher.on_demand_miss(line):
                self.prefetch_fill(pline)

    def device_store(self, addr: int, data: bytes,
                     on_done: Optional[Callable[[], None]] = None) -> None:
        start = self._reserve_hmc()
        self.kernel.call(start - self.kernel.now, self._lookup_store,
                         addr, data, on_done)

    def _lookup_store(self, addr: int, data: bytes, on_done) -> None:
        line = line_of(addr)
        entry = self.hmc.lookup(line)
        if entry is not None and entry.state in (M, E):
            self.hmc.touch(line)
            self._write_hit(entry, addr, data)
            if on_done:
                self.kernel.call(self.cfg.t_hmc_hit, on_done)
            return

        def filled(_tier: str) -> None:
            got = self.hmc.lookup(line)
            self._write_hit(got, addr, data)
            if on_done:
                on_done()

        self.fetch(line, E, filled)

    def _write_hit(self, entry: CacheLine, addr: int, data: bytes) -> None:
        off = addr - entry.line
        entry.data[off:off + len(data)] = data
        entry.state = M  # silent E->M upgrade
        self.commits.write("HMC", addr, data)
        if self.check_invariants:
            self.host.audit_line(entry.line)

    # --- fetch unit -------------------------------------------------------------

    def fetch(self, line: int, want: str, cb: Callable[[str], None],
              prefetch: bool = False) -> None:
        """Coalescing miss handler; sends RdShared/RdOwn after the lookup cost."""
        evicting = self._evicting.get(line)
        if evicting is not None:
            evicting["waiters"].append(lambda: self.fetch(line, want, cb,
                                                          prefetch))
            return
        fe = self._fetches.get(line)
        if fe is not None:
            fe.callbacks.append(cb)
            if want == E and fe.want == S:
                fe.upgrade = True
            if not prefetch:
                fe.prefetch = False
            return
        fe = _Fetch(line, want, req_id=self.host.next_req_id(),
                    prefetch=prefetch)
        fe.callbacks.append(cb)
        self._fetches[line] = fe
        opcode = "RdOwn" if want == E else "RdShared"
        self.kernel.call(self.cfg.t_hmc_hit, self._send_d2h,
                         Msg("D2H-Req", opcode, line, fe.req_id, "HMC"), True)

    def prefetch_fill(self, line: int) -> None:
        if self.hmc.lookup(line) is not None or line in self._fetches:
            return
        if line in self._evicting or self.locks.locked(line):
            return
        self.fetch(line, S, lambda _tier: None, prefetch=True)

    def on_h2d(self, msg: Msg) -> None:
        if msg.channel == "H2D-Req":
            self._on_snoop(msg)
            return
        if msg.opcode == "Data":
            self._fetches[msg.line].data = msg.data
            return
        if msg.opcode == "GoWritePull":
            self._on_write_pull(msg)
            return
        if msg.opcode == "GoInvalidate":
            self._on_evict_done(msg)
            return
        assert msg.opcode == "Go"
        fe = self._fetches.get(msg.line)
        if fe is not None and fe.req_id == msg.req_id:
            del self._fetches[msg.line]
            self.link.release_credit()
            self._install_fill(fe, msg)
            return
        self.link.release_credit()  # Go completing an NCPush
        cb = self._push_waiters.pop(msg.req_id, None)
        if cb is not None:
            cb()

    def _install_fill(self, fe: _Fetch, go: Msg) -> None:
        entry = self.hmc.lookup(fe.line)
        if entry is None:
            self._make_room(fe.line)
            if not self.hmc.room_for(fe.line):
                # every way is locked or has a fill in flight; retry once
                # something in the set can move again
                self._pending_installs.append((fe, go))
                self.locks.notify_next_release(self._drain_pending_installs)
                return
            entry = CacheLine(fe.line, go.state, bytearray(fe.data),
                              prefetched=fe.prefetch)
            self.hmc.insert(entry)
        else:  # upgrade fill for a line already present
            entry.state = go.state
            entry.data = bytearray(fe.data)
        self.hmc.touch(fe.line)
        if self.check_invariants:
            self.host.audit_line(fe.line)
        if fe.upgrade and go.state == S:
            self.fetch(fe.line, E, self._run_callbacks(fe, go.tier))
            return
        for cb in fe.callbacks:
            cb(go.tier)
        self._drain_pending_installs()

    def _run_callbacks(self, fe: _Fetch, tier: str) -> Callable[[str], None]:
        def run(_tier: str) -> None:
            for cb in fe.callbacks:
                cb(tier)
        return run

    def _drain_pending_installs(self) -> None:
        if self._draining or not self._pending_installs:
            return
        self._draining = True
        try:
            pending, self._pending_installs = self._pending_installs, []
            for fe, go in pending:
                self._install_fill(fe, go)
        finally:
            self._draining = False

    def _unevictable(self, line: int) -> bool:
        # a line mid-upgrade must not be victimized: its stale eviction
        # message would cancel the ownership the in-flight fill grants
        return self.locks.locked(line) or line in self._fetches

    def _make_room(self, line: int) -> None:
        if self.hmc.lookup(line) is not None or self.hmc.room_for(line):
            return
        victim = self.hmc.pick_victim(line, self._unevictable)
        if victim is None:
            return
        self.hmc.remove(victim.line)
        req_id = self.host.next_req_id()
        if victim.state == M:
            self._evicting[victim.line] = {"data": bytes(victim.data),
                                           "waiters": [], "req_id": req_id}
            self._send_d2h(Msg("D2H-Req", "DirtyEvict", victim.line, req_id,
                               "HMC"), True)
        else:
            self._send_d2h(Msg("D2H-Req", "CleanEvict", victim.line, req_id,
                               "HMC"), True)

    def _on_write_pull(self, msg: Msg) -> None:
        ev = self._evicting[msg.line]
        self._send_d2h(Msg("D2H-Resp", "WritebackData", msg.line, msg.req_id,
                           "HMC", data=ev["data"]), False)

    def _on_evict_done(self, msg: Msg) -> None:
        self.link.release_credit()
        ev = self._evicting.pop(msg.line, None)
        if ev is not None:
            for waiter in ev["waiters"]:
                waiter()

    # --- snoops ------------------------------------------------------------------

    def _on_snoop(self, msg: Msg) -> None:
        # the tag lookup costs a device-cache access before we can react
        self.kernel.call(self.cfg.t_hmc_hit, self._snoop_eval, msg)

    def _snoop_eval(self, msg: Msg) -> None:
        entry = self.hmc.lookup(msg.line)
        if (entry is not None and entry.state in (M, E)
                and self.locks.locked(msg.line)):
            # the locked copy is the value authority: stall, never drop
            self.locks.acquire(msg.line, lambda: self._snoop_apply(msg, True))
            return
        self._snoop_apply(msg, False)

    def _snoop_apply(self, msg: Msg, release: bool) -> None:
        entry = self.hmc.lookup(msg.line)
        data = None
        kept = None  # state retained after the snoop, None if no copy
        if entry is not None:
            if entry.state == M:
                data = bytes(entry.data)
            if msg.opcode == "SnpInv":
                self.hmc.remove(msg.line)
            else:
                entry.state = S
                kept = S
        elif msg.line in self._evicting:
            # the snoop caught a dirty eviction in flight: the buffered
            # data is the value authority, hand it to the host
            data = self._evicting[msg.line]["data"]
        self._send_d2h(Msg("D2H-Resp", "WritebackData", msg.line, msg.req_id,
                           "HMC", data=data, state=kept), False)
        if release:
            self.locks.release(msg.line)

    # --- NC-P push ------------------------------------------------------------------

    def ncp_push(self, line: int, data: bytes,
                 on_done: Optional[Callable[[], None]] = None) -> None:
        """Push a full line into the LLC without taking ownership.

        The pushing engine owns its destination lines: a push may not race
        a device fetch or eviction of the same line.
        """
        assert len(data) == LINE
        assert line not in self._fetches and line not in self._evicting
        self.hmc.remove(line)  # device never keeps a copy of pushed data
        req_id = self.host.next_req_id()
        self._push_waiters[req_id] = on_done
        self._send_d2h(Msg("D2H-Req", "NCPush", line, req_id, "HMC",
                           data=bytes(data)), True)

    # --- atomics support ----------------------------------------------------------

    def rao_read(self, addr: int, on_data: Callable[[bytes, str], None]) -> None:
        """Exclusive read under a held lock and the serialized DCOH port.

        on_data(old_bytes, tier) fires when the line is in M/E locally;
        the caller must already hold the line lock and the RAO port.
        """
        line = line_of(addr)
        entry = self.hmc.lookup(line)
        if entry is not None and entry.state in (M, E):
            self.hmc.touch(line)
            off = addr - line
            self.kernel.call(self.cfg.t_hmc_hit, on_data,
                             bytes(entry.data[off:off + 8]), "HMC")
            return

        def filled(tier: str) -> None:
            got = self.hmc.lookup(line)
            off = addr - line
            on_data(bytes(got.data[off:off + 8]), tier)

        self.fetch(line, E, filled)

    def rao_write(self, addr: int, data: bytes) -> None:
        """Commit an atomic update; line must be locked and held M/E."""
        line = line_of(addr)
        entry = self.hmc.lookup(line)
        off = addr - line
        self.commits.read("RAO", addr, bytes(entry.data[off:off + len(data)]))
        self.hmc.touch(line)
        self._write_hit(entry, addr, data)

    @property
    def hit_rate(self) -> float:
        total = self._stat_hits + self._stat_misses
        return self._stat_hits / total if total else 0.0


# ---------------------------------------------------------------------------
# Wiring and warm-up placement
# ---------------------------------------------------------------------------


def build_node(kernel: Kernel, cfg: LatencyConfig, *, n_cores: int = 2,
               hmc_bytes: int = 128 * 1024, hmc_ways: int = 4,
               check_invariants: bool = False
               ) -> tuple[HostNode, DeviceNode, MainMemory, MessageLog,
                          CommitLog]:
    mem = MainMemory()
    msg_log = MessageLog()
    commits = CommitLog()
    host = HostNode(kernel, cfg, mem, msg_log, commits, n_cores=n_cores,
                    check_invariants=check_invariants)
    device = DeviceNode(kernel, cfg, mem, msg_log, commits,
                        hmc_bytes=hmc_bytes, hmc_ways=hmc_ways,
                        check_invariants=check_invariants)
    link = CxlLink(kernel, d2h_ps=cfg.t_link_d2h, h2d_ps=cfg.t_link_h2d,
                   credits=cfg.credits)
    host.device = device
    host.link = link
    device.host = host
    device.link = link
    return host, device, mem, msg_log, commits


def warm_place(host: HostNode, device: DeviceNode, line: int,
               where: str) -> None:
    """Zero-time warm-up placement of a line's only copy (LLC, MEM or HMC).

    Stands in for CLDEMOTE/CLFLUSH-style preparation between trials; must
    only run at quiescence (no transaction in flight for the line).
    """
    e = host._entry(line)
    assert not e.busy, "warm placement during an in-flight transaction"
    authoritative = _authoritative_bytes(host, device, line)
    for cache in host.l1:
        cache.remove(line)
    device.hmc.remove(line)
    e.owner = None
    e.sharers = []
    if where == "MEM":
        host.mem.write_line(line, authoritative)
        e.has_data = False
        e.dirty = False
        e.data = None
    elif where == "LLC":
        host.mem.write_line(line, authoritative)
        e.data = bytearray(authoritative)
        e.has_data = True
        e.dirty = False
    elif where == "HMC":
        host.mem.write_line(line, authoritative)
        e.has_data = False
        e.dirty = False
        e.data = None
        if not device.hmc.room_for(line):
            lru = device.hmc.pick_victim(line, device.locks.locked)
            assert lru is not None, "warm placement into a fully locked set"
            warm_place(host, device, lru.line, "MEM")
        device.hmc.insert(CacheLine(line, E, bytearray(authoritative)))
        e.owner = "HMC"
    else:
        raise ValueError(f"unknown placement {where!r}")


def _authoritative_bytes(host: HostNode, device: DeviceNode,
                         line: int) -> bytes:
    for k, cache in enumerate(host.l1):
        entry = cache.lookup(line)
        if entry is not None and entry.state == M:
            return bytes(entry.data)
    entry = device.hmc.lookup(line)
    if entry is not None and entry.state == M:
        return bytes(entry.data)
    e = host.llc.get(line)
    if e is not None and e.has_data:
        return bytes(e.data)
    return host.mem.read_line(line)
