"""Link and memory-path timing: calibrated latency profiles and the DMA engine.

All durations are integer picoseconds. The FPGA-profile constants reproduce a
400 MHz coherent-device testbed; ASIC profiles scale every cycle-denominated
constant by the frequency ratio (exact Fraction math, single rounding to ps)
while DRAM access time stays fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Callable, Optional

from cxlsim.engine import Kernel, SimTime, ns

# Host NUMA topology: distance adder (ps) per node for host-DRAM accesses.
# Node 7 is the local socket; 0-3 sit across the inter-socket fabric.
NUMA_ADDERS_PS = {
    7: 0, 6: ns(5), 5: ns(20), 4: ns(22),
    0: ns(70), 1: ns(73), 2: ns(82), 3: ns(88),
}


def _scale_ps(value: SimTime, ratio: Fraction) -> SimTime:
    exact = value * ratio
    return int(exact) if exact.denominator == 1 else round(exact)


@dataclass
class LatencyConfig:
    """Coherent-path timing constants (ps) for one device profile.

    The tier sums are the calibration identities:
    device-cache hit = t_hmc_hit; LLC hit = t_hmc_hit + t_link_d2h +
    t_llc_service + t_link_h2d; memory hit adds t_dram (+ NUMA adder).
    Occupancies are per-request serialization at each pipeline stage and set
    the streaming bandwidths; they do not appear in isolated latencies.
    """

    freq_mhz: int = 400
    t_hmc_hit: SimTime = ns(115)
    t_link_d2h: SimTime = ns(200)
    t_link_h2d: SimTime = ns(200)
    t_llc_service: SimTime = ns(60.6)
    t_dram: SimTime = ns(112.7)
    t_cxlmem_adder: SimTime = ns(150)      # host load to device memory
    t_hmc_occupancy: SimTime = 2_553       # -> 25.07 GB/s device-cache stream
    t_llc_occupancy: SimTime = 4_539       # -> 14.10 GB/s LLC-hit stream
    t_mem_occupancy: SimTime = 4_744       # -> 13.49 GB/s memory-hit stream
    credits: int = 256                     # max outstanding D2H requests
    numa_adders: dict = field(default_factory=lambda: dict(NUMA_ADDERS_PS))
    # host-side constants; not device-cycle denominated, never scaled
    t_host_l1: SimTime = ns(1.25)
    t_host_llc: SimTime = ns(12.5)

    def scaled_to(self, freq_mhz: int) -> "LatencyConfig":
        """Rescale cycle-denominated constants; DRAM and host times are fixed."""
        ratio = Fraction(self.freq_mhz, freq_mhz)
        return replace(
            self,
            freq_mhz=freq_mhz,
            t_hmc_hit=_scale_ps(self.t_hmc_hit, ratio),
            t_link_d2h=_scale_ps(self.t_link_d2h, ratio),
            t_link_h2d=_scale_ps(self.t_link_h2d, ratio),
            t_llc_service=_scale_ps(self.t_llc_service, ratio),
            t_cxlmem_adder=_scale_ps(self.t_cxlmem_adder, ratio),
            t_hmc_occupancy=_scale_ps(self.t_hmc_occupancy, ratio),
            t_llc_occupancy=_scale_ps(self.t_llc_occupancy, ratio),
            t_mem_occupancy=_scale_ps(self.t_mem_occupancy, ratio),
            numa_adders=dict(self.numa_adders),
        )

    def device_cycles(self, cycles: int) -> SimTime:
        exact = cycles * Fraction(1_000_000, self.freq_mhz)
        return int(exact) if exact.denominator == 1 else round(exact)

    def mem_latency(self, node: int) -> SimTime:
        return self.t_dram + self.numa_adders[node]


@dataclass
class DmaConfig:
    """PCIe/DMA baseline timing (ps).

    Isolated transfer latency = t_setup + size/wire-rate: the descriptor
    round trip dominates, so the latency curve is flat for small transfers.
    Sustained streams are paced by per-descriptor engine time
    (ceil(size/chunk) * t_chunk + size/engine-rate) and by t_desc_issue,
    whichever is larger; 64 B streams land at 0.92 GB/s and 256 KB at
    22.8 GB/s under the defaults.
    """

    freq_mhz: int = 400
    bytes_per_cycle: int = 64              # engine width; peak 25.6 GB/s at 400 MHz
    t_setup: SimTime = 2_500_000
    t_desc_issue: SimTime = 69_565
    t_chunk: SimTime = 2_500               # one engine cycle per payload chunk
    chunk_bytes: int = 512
    wire_ps_per_byte: Fraction = Fraction(125, 8)  # 64 GB/s physical link
    max_outstanding: int = 64
    write_ack_required: bool = True

    def scaled_to(self, freq_mhz: int) -> "DmaConfig":
        ratio = Fraction(self.freq_mhz, freq_mhz)
        return replace(
            self,
            freq_mhz=freq_mhz,
            t_setup=_scale_ps(self.t_setup, ratio),
            t_desc_issue=_scale_ps(self.t_desc_issue, ratio),
            t_chunk=_scale_ps(self.t_chunk, ratio),
        )

    @property
    def peak_gbps(self) -> float:
        return self.bytes_per_cycle * self.freq_mhz / 1000.0

    def engine_time(self, size: int) -> SimTime:
        per_byte = Fraction(1_000_000, self.bytes_per_cycle * self.freq_mhz)
        chunks = -(-size // self.chunk_bytes)
        return chunks * self.t_chunk + _scale_ps(size, per_byte)

    def wire_time(self, size: int) -> SimTime:
        return _scale_ps(size, self.wire_ps_per_byte)

    def isolated_latency(self, size: int) -> SimTime:
        return self.t_setup + self.wire_time(size)


# ---------------------------------------------------------------------------
# CXL link transport: fixed per-direction delay, D2H request credits.
# ---------------------------------------------------------------------------


class CxlLink:
    """Transport between device and host with credit-limited D2H requests.

    D2H *requests* take a credit at issue and return it when their Go-class
    response is consumed; when no credit is free the request parks in a FIFO.
    Response-class messages (writebacks, Go, Data) never wait for credits, so
    in-flight transactions always drain.
    """

    def __init__(self, kernel: Kernel, *, d2h_ps: SimTime, h2d_ps: SimTime,
                 credits: int):
        self.kernel = kernel
        self.d2h_ps = d2h_ps
        self.h2d_ps = h2d_ps
        self.credits_total = credits
        self.credits_free = credits
        self._parked: list = []  # FIFO of (sink, payload)

    def send_d2h(self, sink: Callable[[Any], None], payload,
                 needs_credit: bool) -> None:
        if needs_credit:
            if self.credits_free == 0:
                self._parked.append((sink, payload))
                return
            self.credits_free -= 1
        self.kernel.call(self.d2h_ps, sink, payload)

    def send_h2d(self, sink: Callable[[Any], None], payload) -> None:
        self.kernel.call(self.h2d_ps, sink, payload)

    def release_credit(self) -> None:
        if self._parked:
            sink, payload = self._parked.pop(0)
            self.kernel.call(self.d2h_ps, sink, payload)
        else:
            self.credits_free += 1
            assert self.credits_free <= self.credits_total


# ---------------------------------------------------------------------------
# DMA engine
# ---------------------------------------------------------------------------


@dataclass
class DmaDescriptor:
    size: int
    write: bool
    addr: Optional[int] = None
    data: Optional[bytes] = None
    on_complete: Optional[Callable] = None
    tag: Any = None
    submit_at: SimTime = 0
    complete_at: SimTime = 0


class DmaEngine:
    """Descriptor-based DMA pipeline over the PCIe baseline link.

    Completion time is submit-gated by issue spacing, outstanding limit and
    engine availability, then t_setup + wire serialization. The engine stays
    busy for the chunked processing time, which is what paces sustained
    streams below the wire rate.
    """

    def __init__(self, kernel: Kernel, cfg: DmaConfig, memory=None,
                 trace: Optional[list] = None, name: str = "dma"):
        self.kernel = kernel
        self.cfg = cfg
        self.memory = memory
        self.trace = trace
        self.name = name
        self._issue_free: SimTime = 0
        self._engine_free: SimTime = 0
        self._outstanding = 0
        self._waiting: list[DmaDescriptor] = []

    def submit(self, desc: DmaDescriptor) -> None:
        desc.submit_at = self.kernel.now
        self._waiting.append(desc)
        self._dispatch()

    def _dispatch(self) -> None:
        while self._waiting and self._outstanding < self.cfg.max_outstanding:
            desc = self._waiting.pop(0)
            start = max(self.kernel.now, self._issue_free, self._engine_free)
            self._issue_free = start + self.cfg.t_desc_issue
            self._engine_free = start + self.cfg.engine_time(desc.size)
            desc.complete_at = start + self.cfg.isolated_latency(desc.size)
            self._outstanding += 1
            self.kernel.call(desc.complete_at - self.kernel.now,
                             self._complete, desc)

    def _complete(self, desc: DmaDescriptor) -> None:
        self._outstanding -= 1
        if self.memory is not None and desc.addr is not None:
            if desc.write:
                self.memory.write(desc.addr, desc.data)
            else:
                desc.data = self.memory.read(desc.addr, desc.size)
        if self.trace is not None:
            kind = "dma-write" if desc.write else "dma-read"
            self.trace.append((self.kernel.now, self.name, kind,
                               desc.addr if desc.addr is not None else -1,
                               desc.size))
        if desc.on_complete is not None:
            desc.on_complete(desc)
        self._dispatch()
