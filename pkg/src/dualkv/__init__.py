"""Deterministic simulator of an LSM key-value store on a dual-interface SSD.

The host side is a leveled LSM tree with realistic write-stall behavior;
the device exposes both a block interface (backing the host tree) and a
key-value interface (a small device-side LSM).  When the host tree
stalls, writes can be redirected to the device and drained back later,
which is the mechanism this package exists to measure.
"""

from .accel import MetadataTable, PutResult, Store
from .bench import MetricsSample, RunResult, WorkloadSpec, run_workload
from .config import (POLICIES, POLICY_KVACCEL, POLICY_SLOWDOWN, POLICY_STALL,
                     ROLLBACK_EAGER, ROLLBACK_LAZY, ROLLBACK_MODES, ConfigError,
                     SimConfig, load_config, parse_config_text)
from .device import (BulkScan, DeviceCommand, DeviceFull, HybridDevice, PageAllocator,
                     RegionFault)
from .engine import DeadlockError, Event, EventKind, SchedulingError, SimEngine
from .ledger import BandwidthLedger, Transfer
from .main_lsm import MainLsm, StallStatus, Verdict
from .merged_query import DualIterator, IteratorInvalidated
from .records import CHUNK_MAX, Entry, encoded_size

__version__ = "0.1.0"

__all__ = [
    "BandwidthLedger", "BulkScan", "CHUNK_MAX", "ConfigError", "DeadlockError",
    "DeviceCommand", "DeviceFull", "DualIterator", "Entry", "Event", "EventKind",
    "HybridDevice", "IteratorInvalidated", "MainLsm", "MetadataTable", "MetricsSample",
    "PageAllocator", "POLICIES", "POLICY_KVACCEL", "POLICY_SLOWDOWN", "POLICY_STALL",
    "PutResult", "RegionFault", "ROLLBACK_EAGER", "ROLLBACK_LAZY", "ROLLBACK_MODES",
    "RunResult", "SchedulingError", "SimConfig", "SimEngine", "StallStatus", "Store",
    "Transfer", "Verdict", "WorkloadSpec", "encoded_size", "load_config",
    "parse_config_text", "run_workload",
]
