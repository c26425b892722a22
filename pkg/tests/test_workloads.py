"""Generator shapes, seeding, and statistical contracts of the workloads."""

import struct

import pytest

from cxlsim.engine import Kernel
from cxlsim.coherence import LINE, build_node
from cxlsim.interconnect import LatencyConfig
from cxlsim.protowire import decode_message, encode_message, walk_stats
from cxlsim.rao import CxlRaoUnit
from cxlsim.workloads import (CircusPattern, RPC_BENCHES, bench_schema,
                              dump_requests, gen_circustent, gen_lsu,
                              gen_rpc_bench, gen_rpc_mix)


# ---------------------------------------------------------------------------
# LSU calibration traces
# ---------------------------------------------------------------------------


def test_lsu_latency_trace_shape():
    tr = gen_lsu("LLC", "latency", node=7)
    assert len(tr.lines) == 32
    assert tr.trials == 1000
    assert tr.warm_in == "LLC"
    assert all(b - a == LINE for a, b in zip(tr.lines, tr.lines[1:]))


def test_lsu_bandwidth_trace_shape():
    tr = gen_lsu("MEM", "bandwidth", node=3)
    assert len(tr.lines) == 2048          # 128 KB stream
    assert tr.trials == 1
    assert tr.node == 3


def test_lsu_hmc_trace_warms_by_repetition():
    assert gen_lsu("HMC", "latency").warm_in is None


def test_lsu_rejects_unknown_tier_and_mode():
    with pytest.raises(ValueError):
        gen_lsu("L2")
    with pytest.raises(ValueError):
        gen_lsu("HMC", "burst")


# ---------------------------------------------------------------------------
# atomic patterns
# ---------------------------------------------------------------------------


def test_central_targets_all_equal():
    s = gen_circustent(CircusPattern("CENTRAL", 4, region_base=0x1000))
    assert len(s.requests) == 4
    assert len({r.target for r in s.requests}) == 1
    assert s.index_reads == [None] * 4


def test_stride1_sixteen_ops_span_two_lines():
    s = gen_circustent(CircusPattern("STRIDE1", 16))
    assert [r.target for r in s.requests] == [i * 8 for i in range(16)]
    assert len({r.target // LINE for r in s.requests}) == 2


def test_scatter_targets_follow_index_array():
    pat = CircusPattern("SCATTER", 50, region_bytes=1 << 20, seed=9)
    s = gen_circustent(pat)
    (idx_base, blob), = s.image
    idx = struct.unpack(f"<{len(s.requests)}Q", blob)
    assert idx_base == pat.region_base + pat.region_bytes
    for i, req in enumerate(s.requests):
        assert s.index_reads[i] == idx_base + 8 * i
        assert req.target == pat.region_base + idx[i] * 8


def test_sg_alternates_two_index_arrays():
    s = gen_circustent(CircusPattern("SG", 10, region_bytes=1 << 20))
    assert len(s.image) == 2
    (a_base, _), (b_base, _) = s.image
    assert [r < b_base for r in s.index_reads] == [True, False] * 5
    assert all(r is not None for r in s.index_reads)


def test_rand_is_seeded_and_uniform_ish():
    pat = CircusPattern("RAND", 4000, region_bytes=1 << 30, seed=5)
    a = gen_circustent(pat)
    b = gen_circustent(pat)
    assert [r.target for r in a.requests] == [r.target for r in b.requests]
    c = gen_circustent(CircusPattern("RAND", 4000, region_bytes=1 << 30,
                                     seed=6))
    assert [r.target for r in a.requests] != [r.target for r in c.requests]
    # spread: far more distinct lines than a cache-resident stream would show
    assert len({r.target // LINE for r in a.requests}) > 3500


def test_rand_pattern_device_cache_hit_rate_near_zero():
    kernel = Kernel()
    host, device, mem, _, _ = build_node(kernel, LatencyConfig())
    unit = CxlRaoUnit(kernel, device, n_pes=4)
    stream = gen_circustent(CircusPattern("RAND", 10_000, seed=11))
    tiers = []
    for req in stream.requests:
        unit.submit(req, lambda r: tiers.append(r.tier))
    kernel.run()
    assert len(tiers) == 10_000
    assert tiers.count("HMC") / len(tiers) < 0.01


def test_pattern_validation():
    with pytest.raises(ValueError):
        CircusPattern("SPIRAL", 10)
    with pytest.raises(ValueError):
        CircusPattern("RAND", 0)


def test_dump_requests_one_record_per_line():
    s = gen_circustent(CircusPattern("GATHER", 3, region_bytes=1 << 16))
    text = dump_requests(s).splitlines()
    assert len(text) == 3
    assert all(ln.startswith("FAA 0x") and " via 0x" in ln for ln in text)


# ---------------------------------------------------------------------------
# RPC benches
# ---------------------------------------------------------------------------


def test_benches_roundtrip_through_codec():
    for b in RPC_BENCHES:
        for schema, msg in gen_rpc_bench(b, 40, seed=2):
            assert decode_message(schema, encode_message(schema, msg)) == msg


def test_bench_generation_deterministic():
    assert gen_rpc_bench(3, 25, seed=7) == gen_rpc_bench(3, 25, seed=7)
    assert gen_rpc_bench(3, 25, seed=7) != gen_rpc_bench(3, 25, seed=8)


def test_bench2_nesting_depth_reaches_twelve():
    depths = [walk_stats(s, m).depth
              for s, m in gen_rpc_bench(2, 20, seed=1)]
    assert max(depths) == 12
    assert min(depths) >= 8
    assert max(depths) >= 10


def test_bench5_fields_dwarf_bench1_fields():
    def mean_field_bytes(bench):
        stats = [walk_stats(s, m) for s, m in gen_rpc_bench(bench, 60,
                                                            seed=4)]
        return (sum(st.wire_bytes for st in stats)
                / sum(st.fields for st in stats))

    assert mean_field_bytes(5) > 20 * mean_field_bytes(1)


def test_bench5_messages_all_exceed_512_bytes():
    sizes = [len(encode_message(s, m))
             for s, m in gen_rpc_bench(5, 60, seed=4)]
    assert min(sizes) > 512
    assert max(sizes) < 4096 - 64   # decoded image always fits one flush


def test_pooled_size_distribution_matches_published_shape():
    pool = gen_rpc_mix(20_000, seed=3)
    sizes = [len(encode_message(s, m)) for s, m in pool]
    p32 = sum(x <= 32 for x in sizes) / len(sizes)
    p512 = sum(x <= 512 for x in sizes) / len(sizes)
    assert abs(p32 - 0.56) <= 0.03
    assert abs(p512 - 0.93) <= 0.03


def test_mix_is_deterministic():
    a = gen_rpc_mix(500, seed=42)
    b = gen_rpc_mix(500, seed=42)
    assert [(s.name, m) for s, m in a] == [(s.name, m) for s, m in b]
