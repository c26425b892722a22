"""Config parsing strictness, report emission, and CLI exit codes."""

import json

import pytest

from cxlsim.cli import main
from cxlsim.config import (PROFILES, ConfigError, load_config, parse_config,
                           profile_config)
from cxlsim.experiments import (calibrate_check, emit_report, report_csv,
                                report_json, run_experiment)

MINIMAL = "[sim]\nprofile = cxl-fpga-400\n"


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_minimal_config_populates_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.latency.t_hmc_hit == 115_000
    assert cfg.dma.t_setup == 2_500_000
    assert cfg.seed == 1 and cfg.device == "cxl-nic"


def test_override_is_echoed():
    cfg = parse_config(MINIMAL + "[latency]\nt_dram = 100\n")
    assert cfg.latency.t_dram == 100
    assert cfg.resolved()["latency.t_dram"] == 100


def test_misspelled_key_is_an_error_naming_key_and_line():
    with pytest.raises(ConfigError, match=r":4: unknown key 't_darm'"):
        parse_config(MINIMAL + "[latency]\nt_darm = 5\n")


def test_unknown_section_and_missing_profile_are_errors():
    with pytest.raises(ConfigError, match=r"unknown section"):
        parse_config(MINIMAL + "[latencies]\n")
    with pytest.raises(ConfigError, match=r"missing required section"):
        parse_config("[latency]\nt_dram = 5\n")


def test_out_of_range_and_duplicate_values_are_errors():
    with pytest.raises(ConfigError, match=r"bad value for 'seed'"):
        parse_config("[sim]\nprofile = cxl-fpga-400\nseed = -1\n")
    with pytest.raises(ConfigError, match=r"duplicate key"):
        parse_config(MINIMAL + "[latency]\nt_dram = 1\nt_dram = 2\n")


def test_numa_adder_overrides_merge():
    cfg = parse_config(MINIMAL + "[latency]\nnuma_adder_3 = 99000\n")
    assert cfg.latency.numa_adders[3] == 99_000
    assert cfg.latency.numa_adders[0] == 70_000


def test_asic_profile_scales_cycle_constants():
    cfg = profile_config("cxl-asic-1500")
    assert cfg.latency.t_hmc_hit == 30_667
    assert cfg.latency.t_dram == 112_700  # DRAM time is frequency-independent
    assert cfg.dma.t_setup == 666_667


def test_load_config_reads_files(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(MINIMAL + "[workload]\nrpc_messages = 10\n")
    cfg = load_config(path)
    assert cfg.rpc_messages == 10
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")


def test_digest_tracks_every_field():
    a = parse_config(MINIMAL)
    b = parse_config(MINIMAL + "[workload]\nrao_ops = 7\n")
    assert a.digest() != b.digest()
    assert a.digest() == parse_config(MINIMAL).digest()


def test_digest_ignores_output_plumbing():
    a = parse_config(MINIMAL)
    b = parse_config(MINIMAL + "out = elsewhere\nformat = json\n")
    assert a.resolved() != b.resolved()
    assert a.digest() == b.digest()


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweep():
    return run_experiment("dma-sweep", profile_config("pcie-fpga-400"))


def test_csv_columns_exact(sweep):
    header, *rows = report_csv(sweep).splitlines()
    assert header == "experiment,metric,unit,n,median,p25,p75,mean,stddev"
    assert all(r.startswith("dma-sweep,") for r in rows)


def test_json_mirrors_csv_values(sweep):
    doc = json.loads(report_json(sweep))
    assert doc["experiment"] == "dma-sweep"
    assert doc["config_digest"] == sweep.config_digest
    csv_rows = report_csv(sweep).splitlines()[1:]
    assert len(doc["metrics"]) == len(csv_rows)
    for row, line in zip(doc["metrics"], csv_rows):
        assert line.split(",")[1] == row["metric"]
        assert float(line.split(",")[4]) == pytest.approx(row["median"])


def test_emit_writes_report_and_raw(tmp_path, sweep):
    out = tmp_path / "dma.csv"
    emit_report(sweep, "csv", out)
    assert out.read_text().startswith("experiment,")
    raw = (tmp_path / "dma.csv.raw").read_text()
    assert "# dma.t_setup = 2500000" in raw
    assert any(ln.startswith("stream-64B GB/s ") for ln in raw.splitlines())


def test_tier_latency_report_shape():
    report = run_experiment("tier-latency", profile_config("cxl-fpga-400"))
    assert [s.name for s in report.series] == ["hmc-hit", "llc-hit",
                                               "mem-hit"]
    assert {s.unit for s in report.series} == {"ns"}


def test_calibrate_check_flags_a_detuned_profile():
    cfg = profile_config("cxl-fpga-400")
    cfg.latency.t_dram = 200_000  # ~775 ns memory tier, far off golden
    result = calibrate_check(cfg)
    assert not result.passed
    assert any(not r.ok and r.metric == "mem-hit" for r in result.rows)
    with pytest.raises(ConfigError, match="no golden calibration"):
        calibrate_check(profile_config("cxl-asic-1500"))


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def test_cli_list_profiles(capsys):
    assert main(["list-profiles"]) == 0
    out = capsys.readouterr().out
    assert all(p in out for p in PROFILES)


def test_cli_run_writes_outputs(tmp_path, capsys):
    rc = main(["run", "dma-sweep", "--profile", "pcie-fpga-400",
               "--out", str(tmp_path), "--format", "json", "--trace-nic"])
    assert rc == 0
    assert (tmp_path / "dma-sweep.json").exists()
    assert (tmp_path / "dma-sweep.json.raw").exists()
    assert (tmp_path / "dma-sweep.dma.nic.trace").exists()


def test_cli_usage_and_config_errors_exit_1(tmp_path, capsys):
    assert main(["run", "dma-sweep"]) == 1  # no config source
    bad = tmp_path / "bad.cfg"
    bad.write_text("[sim]\nprofile = cxl-fpga-400\n[latency]\nt_darm = 1\n")
    assert main(["run", "dma-sweep", "--config", str(bad)]) == 1
    # abbreviated flags are rejected, not prefix-matched
    assert main(["run", "dma-sweep", "--profil", "cxl-fpga-400"]) == 1


def test_cli_calibrate_check_passes_shipped_profiles(capsys):
    assert main(["calibrate-check", "--profile", "cxl-fpga-400"]) == 0
    assert "MAPE" in capsys.readouterr().out


def test_cli_calibration_failure_exits_2(monkeypatch, capsys):
    import cxlsim.cli as cli

    class Failed:
        passed = False

        def table(self):
            return "forced failure"

    monkeypatch.setattr(cli, "calibrate_check", lambda cfg: Failed())
    assert main(["calibrate-check", "--profile", "cxl-fpga-400"]) == 2


def test_cli_simulation_fault_exits_3(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(MINIMAL + "[engine]\nmax_events = 10\n")
    rc = main(["run", "tier-latency", "--config", str(cfg)])
    assert rc == 3
    assert "simulation fault" in capsys.readouterr().err
