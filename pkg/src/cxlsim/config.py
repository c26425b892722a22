"""Run configuration: shipped latency profiles and a strict config-file parser.

Config grammar (one statement per line)::

    # comment lines start with '#' or ';'
    [section]
    key = value

Sections and keys are a closed schema: an unknown section, unknown key,
duplicate, or out-of-range value is an error naming the offending line — no
silent typos. Durations are integer picoseconds; sizes are bytes. The ``[sim]``
section is required and must name a profile.

A profile fixes the clock frequency and the primary device kind; every
latency/DMA field can then be overridden literally in its section (overrides
apply after profile scaling, so the echoed value is exactly what was written).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Optional

from cxlsim.interconnect import DmaConfig, LatencyConfig

PROFILES = ("cxl-fpga-400", "pcie-fpga-400", "cxl-asic-1500", "pcie-asic-1500")

_PROFILE_FREQ = {"cxl-fpga-400": 400, "pcie-fpga-400": 400,
                 "cxl-asic-1500": 1500, "pcie-asic-1500": 1500}

SUITES = ("numa-latency", "tier-latency", "tier-bandwidth", "dma-sweep",
          "rao", "rpc")


class ConfigError(ValueError):
    """Malformed config text or an out-of-schema key/value."""


@dataclass
class SimConfig:
    """One run's fully resolved settings.

    ``latency`` and ``dma`` are both always populated (offload suites compare
    a coherent device against the DMA baseline at the same frequency);
    ``device`` records which one the profile makes primary.
    """

    profile: str = "cxl-fpga-400"
    seed: int = 1
    device: str = "cxl-nic"                # cxl-nic | pcie-nic
    out_dir: str = "results"
    out_format: str = "csv"                # csv | json
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    dma: DmaConfig = field(default_factory=DmaConfig)
    # topology
    n_cores: int = 2
    hmc_bytes: int = 128 * 1024
    hmc_ways: int = 4
    numa_node: int = 7
    # workload sizing
    region_bytes: int = 1 << 30
    rao_ops: int = 100_000
    rpc_messages: int = 200
    # engine
    max_events: int = 10**10

    def resolved(self) -> dict[str, Any]:
        """Flat echo of every effective setting, for reports and digests."""
        out: dict[str, Any] = {
            "sim.profile": self.profile,
            "sim.seed": self.seed,
            "sim.device": self.device,
            "sim.out": self.out_dir,
            "sim.format": self.out_format,
        }
        for f in fields(LatencyConfig):
            value = getattr(self.latency, f.name)
            if f.name == "numa_adders":
                for node in sorted(value):
                    out[f"latency.numa_adder_{node}"] = value[node]
            else:
                out[f"latency.{f.name}"] = value
        for f in fields(DmaConfig):
            value = getattr(self.dma, f.name)
            if isinstance(value, Fraction):
                value = f"{value.numerator}/{value.denominator}"
            out[f"dma.{f.name}"] = value
        out.update({
            "topology.n_cores": self.n_cores,
            "topology.hmc_bytes": self.hmc_bytes,
            "topology.hmc_ways": self.hmc_ways,
            "topology.numa_node": self.numa_node,
            "workload.region_bytes": self.region_bytes,
            "workload.rao_ops": self.rao_ops,
            "workload.rpc_messages": self.rpc_messages,
            "engine.max_events": self.max_events,
        })
        return out

    def digest(self) -> str:
        """Digest of the simulation-defining settings.

        Output plumbing (sim.out, sim.format) is echoed in reports but does
        not affect any simulated number, so it does not enter the digest:
        rerunning the same experiment into a different directory must
        identify as the same run.
        """
        text = "\n".join(f"{k}={v}" for k, v in self.resolved().items()
                         if k not in ("sim.out", "sim.format"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def profile_config(profile: str, *, seed: int = 1) -> SimConfig:
    """A SimConfig carrying only a shipped profile's defaults."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; "
                          f"choose one of {', '.join(PROFILES)}")
    freq = _PROFILE_FREQ[profile]
    return SimConfig(
        profile=profile,
        device="pcie-nic" if profile.startswith("pcie") else "cxl-nic",
        latency=LatencyConfig().scaled_to(freq),
        dma=DmaConfig().scaled_to(freq),
    )


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _pos_int(raw: str) -> int:
    value = int(raw, 0)
    if value <= 0:
        raise ValueError("must be positive")
    return value


def _nonneg_int(raw: str) -> int:
    value = int(raw, 0)
    if value < 0:
        raise ValueError("must not be negative")
    return value


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError("expected true or false")


def _fraction(raw: str) -> Fraction:
    value = Fraction(raw)
    if value <= 0:
        raise ValueError("must be positive")
    return value


def _choice(*allowed: str) -> Callable[[str], str]:
    def convert(raw: str) -> str:
        if raw not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}")
        return raw
    return convert


_LATENCY_KEYS = {f.name: _pos_int for f in fields(LatencyConfig)
                 if f.name not in ("numa_adders",)}
_LATENCY_KEYS.update({f"numa_adder_{n}": _nonneg_int for n in range(8)})

_DMA_KEYS: dict[str, Callable[[str], Any]] = {
    f.name: _pos_int for f in fields(DmaConfig)
    if f.name not in ("wire_ps_per_byte", "write_ack_required")}
_DMA_KEYS["wire_ps_per_byte"] = _fraction
_DMA_KEYS["write_ack_required"] = _bool

_SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "sim": {
        "profile": _choice(*PROFILES),
        "seed": _nonneg_int,
        "device": _choice("cxl-nic", "pcie-nic"),
        "out": str,
        "format": _choice("csv", "json"),
    },
    "latency": _LATENCY_KEYS,
    "dma": _DMA_KEYS,
    "topology": {
        "n_cores": _pos_int,
        "hmc_bytes": _pos_int,
        "hmc_ways": _pos_int,
        "numa_node": _choice(*[str(n) for n in range(8)]),
    },
    "workload": {
        "region_bytes": _pos_int,
        "rao_ops": _pos_int,
        "rpc_messages": _pos_int,
    },
    "engine": {"max_events": _pos_int},
}


def _parse_statements(text: str, source: str
                      ) -> dict[str, dict[str, tuple[str, int]]]:
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current: Optional[dict[str, tuple[str, int]]] = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown section "
                                  f"[{name}]")
            if name in sections:
                raise ConfigError(f"{source}:{lineno}: duplicate section "
                                  f"[{name}]")
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value' "
                              f"or a [section] header")
        if current is None:
            raise ConfigError(f"{source}:{lineno}: key outside any section")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in current:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        current[key] = (value, lineno)
    return sections


def parse_config(text: str, source: str = "<config>") -> SimConfig:
    """Parse config text into a resolved SimConfig; errors name key and line."""
    statements = _parse_statements(text, source)
    if "sim" not in statements or "profile" not in statements["sim"]:
        raise ConfigError(f"{source}: missing required section [sim] with "
                          f"a 'profile' key")

    typed: dict[str, dict[str, Any]] = {}
    for section, entries in statements.items():
        schema = _SCHEMA[section]
        typed[section] = {}
        for key, (raw, lineno) in entries.items():
            if key not in schema:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r} "
                                  f"in [{section}]")
            try:
                typed[section][key] = schema[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for "
                                  f"{key!r}: {exc}") from None

    sim = typed["sim"]
    cfg = profile_config(sim["profile"])
    cfg.seed = sim.get("seed", cfg.seed)
    cfg.device = sim.get("device", cfg.device)
    cfg.out_dir = sim.get("out", cfg.out_dir)
    cfg.out_format = sim.get("format", cfg.out_format)

    lat_over = dict(typed.get("latency", {}))
    adders = {n: lat_over.pop(f"numa_adder_{n}")
              for n in range(8) if f"numa_adder_{n}" in lat_over}
    if adders:
        merged = dict(cfg.latency.numa_adders)
        merged.update(adders)
        lat_over["numa_adders"] = merged
    if lat_over:
        cfg.latency = replace(cfg.latency, **lat_over)
    dma_over = typed.get("dma", {})
    if dma_over:
        cfg.dma = replace(cfg.dma, **dma_over)

    topo = typed.get("topology", {})
    cfg.n_cores = topo.get("n_cores", cfg.n_cores)
    cfg.hmc_bytes = topo.get("hmc_bytes", cfg.hmc_bytes)
    cfg.hmc_ways = topo.get("hmc_ways", cfg.hmc_ways)
    cfg.numa_node = int(topo.get("numa_node", cfg.numa_node))
    work = typed.get("workload", {})
    cfg.region_bytes = work.get("region_bytes", cfg.region_bytes)
    cfg.rao_ops = work.get("rao_ops", cfg.rao_ops)
    cfg.rpc_messages = work.get("rpc_messages", cfg.rpc_messages)
    cfg.max_events = typed.get("engine", {}).get("max_events", cfg.max_events)
    return cfg


def load_config(path) -> SimConfig:
    """Read and parse a config file; see module docstring for the grammar."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config(text, source=str(p))
