"""Protocol-level tests: exact tier latencies, flows, LRU, locks, pushes."""

import pytest

from cxlsim.engine import Kernel
from cxlsim.coherence import (
    LINE, E, M, S, CacheLine, SetAssocCache, build_node, line_of,
    replay_commits, warm_place,
)
from cxlsim.interconnect import LatencyConfig


def make_world(**kw):
    kernel = Kernel()
    host, device, mem, log, commits = build_node(
        kernel, LatencyConfig(), check_invariants=True, **kw)
    return kernel, host, device, mem, log, commits


def run_load(kernel, device, addr, **kw):
    out = {}

    def done(tier):
        out["tier"] = tier
        out["t"] = kernel.now

    t0 = kernel.now
    device.device_load(addr, on_done=done, **kw)
    kernel.run()
    out["latency"] = out["t"] - t0
    return out


# --- exact tier latencies ---------------------------------------------------

def test_device_load_hmc_hit_latency():
    kernel, host, device, mem, log, commits = make_world()
    warm_place(host, device, 0x1000, "HMC")
    out = run_load(kernel, device, 0x1000)
    assert out == {"tier": "HMC", "t": 115_000, "latency": 115_000}


def test_device_load_llc_hit_latency():
    kernel, host, device, mem, log, commits = make_world()
    warm_place(host, device, 0x1000, "LLC")
    out = run_load(kernel, device, 0x1000)
    assert out["tier"] == "LLC"
    assert out["latency"] == 575_600


def test_device_load_memory_latency():
    kernel, host, device, mem, log, commits = make_world()
    warm_place(host, device, 0x1000, "MEM")
    out = run_load(kernel, device, 0x1000)
    assert out["tier"] == "MEM"
    assert out["latency"] == 688_300


@pytest.mark.parametrize("node,extra", [(7, 0), (6, 5_000), (4, 22_000),
                                        (3, 88_000)])
def test_memory_latency_numa_adders(node, extra):
    kernel, host, device, mem, log, commits = make_world()
    host.mem_node = node
    warm_place(host, device, 0x1000, "MEM")
    out = run_load(kernel, device, 0x1000)
    assert out["latency"] == 688_300 + extra


def test_llc_hit_stream_spacing():
    kernel, host, device, mem, log, commits = make_world()
    lines = [0x40000 + i * LINE for i in range(32)]
    for ln in lines:
        warm_place(host, device, ln, "LLC")
    done_at = []
    for ln in lines:
        device.device_load(ln, on_done=lambda _t: done_at.append(kernel.now))
    kernel.run()
    gaps = [b - a for a, b in zip(done_at, done_at[1:])]
    assert gaps[4:] == [4_539] * len(gaps[4:])  # LLC occupancy paces the tail


def test_memory_stream_spacing():
    kernel, host, device, mem, log, commits = make_world()
    lines = [0x80000 + i * LINE for i in range(32)]
    for ln in lines:
        warm_place(host, device, ln, "MEM")
    done_at = []
    for ln in lines:
        device.device_load(ln, on_done=lambda _t: done_at.append(kernel.now))
    kernel.run()
    gaps = [b - a for a, b in zip(done_at, done_at[1:])]
    assert gaps[4:] == [4_744] * len(gaps[4:])


# --- protocol flows ----------------------------------------------------------

def test_rdshared_grants_exclusive_when_sole():
    kernel, host, device, mem, log, commits = make_world()
    run_load(kernel, device, 0x2000)
    assert device.hmc.lookup(0x2000).state == E
    assert host.llc[0x2000].owner == "HMC"


def test_rdshared_grants_shared_next_to_host_copy():
    kernel, host, device, mem, log, commits = make_world()
    host.host_access(0, "load", 0x2000)
    kernel.run()
    run_load(kernel, device, 0x2000)
    assert device.hmc.lookup(0x2000).state == S
    assert sorted(host.llc[0x2000].sharers) == ["HMC", "L1:0"]


def test_silent_exclusive_to_modified_upgrade():
    kernel, host, device, mem, log, commits = make_world()
    run_load(kernel, device, 0x3000)  # granted E
    before = len(log.records)
    device.device_store(0x3000, b"\xAA" * 8)
    kernel.run()
    assert device.hmc.lookup(0x3000).state == M
    assert len(log.records) == before  # no link traffic for the upgrade


def test_clean_evict_flow():
    kernel, host, device, mem, log, commits = make_world(hmc_bytes=4 * LINE,
                                                         hmc_ways=4)
    # single-set cache: four fills, the fifth evicts the LRU cleanly
    for i in range(5):
        run_load(kernel, device, i * LINE)
    ops = [m.opcode for _, m in log.records]
    assert ops.count("CleanEvict") == 1
    assert ops.count("GoInvalidate") == 1
    assert device.hmc.lookup(0) is None
    assert host.llc[0].owner is None and host.llc[0].sharers == []


def test_dirty_evict_flow_order_and_data():
    kernel, host, device, mem, log, commits = make_world(hmc_bytes=4 * LINE,
                                                         hmc_ways=4)
    run_load(kernel, device, 0)
    device.device_store(0, b"\x77" * 8)
    kernel.run()
    for i in range(1, 5):  # force the dirty line out
        run_load(kernel, device, i * LINE)
    seq = [(m.opcode, m.data is not None) for _, m in log.records
           if m.line == 0 and m.opcode in ("DirtyEvict", "GoWritePull",
                                           "WritebackData", "GoInvalidate")]
    assert seq == [("DirtyEvict", False), ("GoWritePull", False),
                   ("WritebackData", True), ("GoInvalidate", False)]
    e = host.llc[0]
    assert e.has_data and e.dirty and bytes(e.data[:8]) == b"\x77" * 8
    assert mem.read(0, 8) == b"\x00" * 8  # DRAM intentionally stale


def test_lru_victim_selection_and_touch():
    cache = SetAssocCache("t", 4 * LINE, 4)
    for i in range(4):
        cache.insert(CacheLine(i * LINE, E, bytearray(LINE)))
    cache.touch(0)  # line 0 becomes most recent; line 64 is now LRU
    victim = cache.pick_victim(4 * LINE, lambda _l: False)
    assert victim.line == LINE
    victim = cache.pick_victim(4 * LINE, lambda l: l == LINE)
    assert victim.line == 2 * LINE  # locked LRU is skipped


def test_ncp_push_installs_dirty_in_llc():
    kernel, host, device, mem, log, commits = make_world()
    payload = bytes(range(64))
    done = []
    device.ncp_push(0x9000, payload, on_done=lambda: done.append(kernel.now))
    kernel.run()
    assert done
    e = host.llc[0x9000]
    assert e.has_data and e.dirty and bytes(e.data) == payload
    assert e.owner is None and e.sharers == []
    assert device.hmc.lookup(0x9000) is None
    assert mem.read_line(0x9000) == b"\x00" * LINE  # push bypasses DRAM
    # host read must observe the pushed bytes
    host.host_access(0, "load", 0x9000, size=8)
    kernel.run()
    assert replay_commits(commits) >= 1


def test_host_load_snoops_device_modified_line():
    kernel, host, device, mem, log, commits = make_world()
    run_load(kernel, device, 0x5000)
    device.device_store(0x5000, b"\x42" * 8)
    kernel.run()
    host.host_access(0, "load", 0x5000, size=8)
    kernel.run()
    assert [m.opcode for _, m in log.records if m.channel == "H2D-Req"] \
        == ["SnpData"]
    assert device.hmc.lookup(0x5000).state == S
    assert host.l1[0].lookup(0x5000).data[:8] == b"\x42" * 8
    assert mem.read(0x5000, 8) == b"\x42" * 8  # write-through on downgrade
    replay_commits(commits)


def test_host_store_invalidates_device_copy():
    kernel, host, device, mem, log, commits = make_world()
    run_load(kernel, device, 0x6000)
    host.host_access(0, "store", 0x6000, size=8, data=b"\x10" * 8)
    kernel.run()
    assert [m.opcode for _, m in log.records if m.channel == "H2D-Req"] \
        == ["SnpInv"]
    assert device.hmc.lookup(0x6000) is None
    assert host.llc[0x6000].owner == "L1:0"
    out = run_load(kernel, device, 0x6000)  # device re-reads the new value
    assert device.hmc.lookup(0x6000).data[:8] == b"\x10" * 8
    replay_commits(commits)


def test_peer_core_modified_line_served_to_other_core():
    kernel, host, device, mem, log, commits = make_world()
    host.host_access(0, "store", 0x7000, size=8, data=b"\x33" * 8)
    kernel.run()
    host.host_access(1, "load", 0x7000, size=8)
    kernel.run()
    assert host.l1[1].lookup(0x7000).data[:8] == b"\x33" * 8
    assert host.l1[0].lookup(0x7000).state == S
    assert sorted(host.llc[0x7000].sharers) == ["L1:0", "L1:1"]
    replay_commits(commits)


def test_snoop_to_locked_modified_line_stalls_until_unlock():
    kernel, host, device, mem, log, commits = make_world()
    run_load(kernel, device, 0x8000)
    device.device_store(0x8000, b"\x55" * 8)
    kernel.run()
    device.locks.acquire(0x8000, lambda: None)  # engine holds the line
    done = []
    host.host_access(0, "load", 0x8000, size=8,
                     on_done=lambda _issue: done.append(kernel.now))
    kernel.run()
    assert not done  # snoop is stalled behind the lock
    unlock_at = kernel.now + 50_000
    kernel.call(50_000, device.locks.release, 0x8000)
    kernel.run()
    assert done and done[0] > unlock_at
    assert host.l1[0].lookup(0x8000).data[:8] == b"\x55" * 8
    replay_commits(commits)


def test_fetch_coalescing_single_request():
    kernel, host, device, mem, log, commits = make_world()
    tiers = []
    device.device_load(0xA000, on_done=tiers.append)
    device.device_load(0xA000, on_done=tiers.append)
    kernel.run()
    assert tiers == ["MEM", "MEM"]
    assert len([m for _, m in log.records if m.opcode == "RdShared"]) == 1


def test_store_upgrade_from_shared_uses_rdown():
    kernel, host, device, mem, log, commits = make_world()
    host.host_access(0, "load", 0xB000)
    kernel.run()
    run_load(kernel, device, 0xB000)  # S next to the host copy
    device.device_store(0xB000, b"\x01" * 8)
    kernel.run()
    ops = [m.opcode for _, m in log.records if m.channel == "D2H-Req"]
    assert ops == ["RdShared", "RdOwn"]
    assert device.hmc.lookup(0xB000).state == M
    assert host.l1[0].lookup(0xB000) is None  # invalidated by the upgrade
    replay_commits(commits)


def test_load_of_line_being_dirty_evicted_waits():
    kernel, host, device, mem, log, commits = make_world(hmc_bytes=4 * LINE,
                                                         hmc_ways=4)
    run_load(kernel, device, 0)
    device.device_store(0, b"\x99" * 8)
    kernel.run()
    for i in range(1, 5):
        run_load(kernel, device, i * LINE)  # line 0 now mid-eviction or gone
    out = run_load(kernel, device, 0)
    got = device.hmc.lookup(0)
    assert got.data[:8] == b"\x99" * 8
    replay_commits(commits)


def test_every_d2h_request_gets_exactly_one_go():
    kernel, host, device, mem, log, commits = make_world(hmc_bytes=4 * LINE,
                                                         hmc_ways=4)
    for i in range(9):
        run_load(kernel, device, i * LINE)
    device.device_store(2 * LINE, b"\x11" * 8)
    device.ncp_push(0x9000, bytes(64))
    kernel.run()
    reqs = log.d2h_request_ids()
    gos = log.go_response_ids()
    assert sorted(reqs) == sorted(gos)
    assert len(set(gos)) == len(gos)


def test_credit_exhaustion_preserves_fifo_and_completes():
    kernel, host, device, mem, log, commits = make_world()
    host.link._credits = 2  # squeeze the request channel
    done = []
    for i in range(8):
        device.device_load(0xC000 + i * LINE,
                           on_done=lambda _t, i=i: done.append(i))
    kernel.run()
    assert done == list(range(8))
    replay_commits(commits)


def test_directory_accurate_at_quiescence():
    kernel, host, device, mem, log, commits = make_world()
    for i in range(6):
        run_load(kernel, device, 0xD000 + i * LINE)
    host.host_access(0, "load", 0xD000)
    host.host_access(1, "store", 0xD040, size=4, data=b"\xEE" * 4)
    kernel.run()
    device.device_store(0xD080, b"\xdd" * 8)
    kernel.run()
    host.audit_directory()
    replay_commits(commits)


def test_host_access_device_range_is_uncached():
    kernel, host, device, mem, log, commits = make_world()
    base = 1 << 40
    host.host_access(0, "store", base + 0x100, size=8, data=b"\xAB" * 8)
    kernel.run()
    assert mem.read(base + 0x100, 8) == b"\xAB" * 8
    assert host.l1[0].lookup(line_of(base + 0x100)) is None
    done = []
    host.host_access(0, "load", base + 0x100, size=8,
                     on_done=lambda issue: done.append(kernel.now - issue))
    kernel.run()
    cfg = host.cfg
    assert done[0] == (cfg.t_host_l1 + cfg.t_host_llc + cfg.t_cxlmem_adder
                       + cfg.t_dram)
    replay_commits(commits)
