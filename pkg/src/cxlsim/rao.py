"""Remote atomic operation (RAO) engines.

Two implementations of NIC-executed atomics against host memory:

* :class:`CxlRaoUnit` — a pool of processing elements behind the coherent
  device cache. Each atomic locks its line, serializes its read through the
  shared cache port (hit: one cache access; miss: an exclusive fetch), applies
  the operation, and writes back into the device cache, leaving the line
  dirty there. Repeated atomics to hot lines never touch the interconnect.

* :class:`PcieRaoUnit` — the DMA baseline. Each atomic is a read DMA, an
  on-NIC modify, and a write DMA. Atomics to the same address are strictly
  ordered (the next read may not issue before the previous write ack);
  atomics to distinct addresses may overlap up to the DMA engine's
  outstanding limit.

Both produce :class:`RaoResponse` carrying the old value, which for any
interleaving on one address must equal the running sequence of a sequential
application of the operations (the per-line lock/ordering makes each
read-modify-write indivisible).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional

from .engine import Kernel, SimTime
from .coherence import DEVICE_BASE, DeviceNode, MainMemory, line_of
from .interconnect import DmaDescriptor, DmaEngine

__all__ = ["RAO_OPS", "RaoRequest", "RaoResponse", "RaoError",
           "CxlRaoUnit", "PcieRaoUnit", "apply_op"]

MASK64 = (1 << 64) - 1

RAO_OPS = ("FAA", "CAS", "SWAP", "AND", "OR", "XOR")


class RaoError(ValueError):
    """Rejected atomic request (bad op, alignment, or range)."""


def apply_op(op: str, old: int, a: int, b: int) -> tuple[int, bool]:
    """Return (new_value, store_needed) for an atomic on ``old``."""
    if op == "FAA":
        return (old + a) & MASK64, True
    if op == "CAS":
        return (b, True) if old == a else (old, False)
    if op == "SWAP":
        return a, True
    if op == "AND":
        return old & a, True
    if op == "OR":
        return old | a, True
    if op == "XOR":
        return old ^ a, True
    raise RaoError(f"unknown atomic op {op!r}")


@dataclass(frozen=True)
class RaoRequest:
    op: str
    target: int
    operand_a: int = 0
    operand_b: int = 0
    source: int = 0


@dataclass(frozen=True)
class RaoResponse:
    old_value: int
    completion: SimTime
    tier: str  # service tier of the read stage: HMC | LLC | MEM


def _validate(req: RaoRequest) -> None:
    if req.op not in RAO_OPS:
        raise RaoError(f"unknown atomic op {req.op!r}")
    if req.target % 8 != 0:
        raise RaoError(f"target {req.target:#x} is not 8-byte aligned")
    if not 0 <= req.target < DEVICE_BASE:
        raise RaoError(f"target {req.target:#x} outside host memory")
    for name in ("operand_a", "operand_b"):
        if not 0 <= getattr(req, name) <= MASK64:
            raise RaoError(f"{name} out of 64-bit range")


class CxlRaoUnit:
    """PE pool executing atomics through the coherent device cache.

    The PE count may not exceed the device-cache associativity: every active
    atomic pins (locks) one line, and a full set of pinned lines would leave
    no way for the port holder's fill to land.
    """

    def __init__(self, kernel: Kernel, device: DeviceNode, *,
                 n_pes: int = 4, t_modify: Optional[SimTime] = None,
                 trace: Optional[list] = None):
        if not 1 <= n_pes <= device.hmc.ways:
            raise ValueError(
                f"n_pes must be within 1..{device.hmc.ways} "
                f"(device cache ways); got {n_pes}")
        self.kernel = kernel
        self.device = device
        self.t_modify = (device.cfg.device_cycles(2) if t_modify is None
                         else t_modify)
        self.trace = trace
        self._free = list(range(n_pes))
        self._rx: list[tuple[RaoRequest, Optional[Callable]]] = []
        self.completed = 0

    def submit(self, req: RaoRequest,
               on_done: Optional[Callable[[RaoResponse], None]] = None) -> None:
        _validate(req)
        self._rx.append((req, on_done))
        self._dispatch()

    def _dispatch(self) -> None:
        while self._rx and self._free:
            pe = self._free.pop(0)
            req, on_done = self._rx.pop(0)
            self._execute(pe, req, on_done)

    def _execute(self, pe: int, req: RaoRequest, on_done) -> None:
        dev = self.device
        line = line_of(req.target)
        if self.trace is not None:
            self.trace.append((self.kernel.now, f"PE-{pe}", "start",
                               req.target, req.op))

        def locked():
            dev.rao_port.acquire(ported)

        def ported():
            dev.rao_read(req.target, got_old)

        def got_old(old_bytes: bytes, tier: str) -> None:
            old = struct.unpack("<Q", old_bytes)[0]
            new, store = apply_op(req.op, old, req.operand_a, req.operand_b)
            self.kernel.call(self.t_modify, finish, old, new, store, tier)

        def finish(old: int, new: int, store: bool, tier: str) -> None:
            if store:
                dev.rao_write(req.target, struct.pack("<Q", new))
            dev.rao_port.release()
            dev.locks.release(line)
            if self.trace is not None:
                self.trace.append((self.kernel.now, f"PE-{pe}", "done",
                                   req.target, old))
            self.completed += 1
            self._free.append(pe)
            if on_done:
                on_done(RaoResponse(old, self.kernel.now, tier))
            self._dispatch()

        dev.locks.acquire(line, locked)


class PcieRaoUnit:
    """DMA-baseline atomics: read DMA, on-NIC modify, write DMA.

    Requests to one address are chained: the next read is submitted only on
    the previous request's write acknowledgment. Requests to distinct
    addresses are submitted immediately and overlap as far as the DMA
    engine's outstanding limit allows.
    """

    def __init__(self, kernel: Kernel, dma: DmaEngine, memory: MainMemory, *,
                 t_modify: Optional[SimTime] = None,
                 trace: Optional[list] = None):
        self.kernel = kernel
        self.dma = dma
        if dma.memory is None:
            dma.memory = memory
        self.t_modify = (int(2 * 1_000_000 / dma.cfg.freq_mhz)
                         if t_modify is None else t_modify)
        self.trace = trace
        self._chains: dict[int, list] = {}  # target -> queued requests
        self.completed = 0

    def submit(self, req: RaoRequest,
               on_done: Optional[Callable[[RaoResponse], None]] = None) -> None:
        _validate(req)
        chain = self._chains.get(req.target)
        if chain is not None:  # an atomic on this address is in flight
            chain.append((req, on_done))
            return
        self._chains[req.target] = []
        self._run(req, on_done)

    def _run(self, req: RaoRequest, on_done) -> None:
        def read_done(desc: DmaDescriptor) -> None:
            old = struct.unpack("<Q", desc.data)[0]
            new, store = apply_op(req.op, old, req.operand_a, req.operand_b)
            self.kernel.call(self.t_modify, modified, old, new, store)

        def modified(old: int, new: int, store: bool) -> None:
            if store:
                self.dma.submit(DmaDescriptor(
                    size=8, write=True, addr=req.target,
                    data=struct.pack("<Q", new),
                    on_complete=lambda _d: acked(old)))
            else:
                acked(old)

        def acked(old: int) -> None:
            self.completed += 1
            if self.trace is not None:
                self.trace.append((self.kernel.now, "pcie-rao", "done",
                                   req.target, old))
            if on_done:
                on_done(RaoResponse(old, self.kernel.now, "DMA"))
            chain = self._chains[req.target]
            if chain:
                nxt, nxt_done = chain.pop(0)
                self._run(nxt, nxt_done)
            else:
                del self._chains[req.target]

        self.dma.submit(DmaDescriptor(size=8, write=False, addr=req.target,
                                      on_complete=read_done))
