"""Deterministic discrete-event simulator of a CXL-coherent host/device node.

The package models a host (cores, inclusive LLC with an embedded directory,
DRAM) attached to a cache-coherent device (DCOH agent with a small device-side
cache) over a CXL.cache/CXL.mem-style link, plus a PCIe/DMA baseline device.
On top of that sit two NIC offload case studies: remote atomic operations and
RPC de/serialization engines.
"""

from cxlsim.engine import Kernel, SimTime, StatSeries

__version__ = "0.1.0"

__all__ = ["Kernel", "SimTime", "StatSeries", "__version__"]
