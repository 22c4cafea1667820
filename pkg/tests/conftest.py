"""Shared fixtures: a desk-scale config that stalls within a handful of puts."""

import pytest

from dualkv import SimConfig, Store


def tiny_cfg(**overrides) -> SimConfig:
    """A config small enough that single puts drive the full LSM lifecycle.

    The 16 KiB memtable rotates every few 2-4 KiB values, one immutable
    memtable saturates the flush queue, and two L0 files already queue a
    compaction, so stall episodes appear within tens of operations.
    """
    base = dict(
        memtable_bytes=16 * 1024,
        max_immutable_memtables=1,
        l0_slowdown_files=2,
        l0_stop_files=3,
        l0_compaction_trigger=2,
        level1_target_bytes=64 * 1024,
        max_sst_bytes=32 * 1024,
        total_pages=8192,            # 32 MiB device
        disaggregation_point=6144,   # 24 MiB block region, 8 MiB kv region
        policy="kvaccel",
        rollback_mode="eager",
    )
    base.update(overrides)
    return SimConfig(**base)


@pytest.fixture
def store() -> Store:
    st = Store(tiny_cfg())
    st.start()
    return st


@pytest.fixture
def baseline_store() -> Store:
    st = Store(tiny_cfg(policy="baseline-stall"))
    st.start()
    return st
