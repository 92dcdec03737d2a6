import pytest

from lsmkv.model import EngineConfig


@pytest.fixture
def tiny_config():
    """Small geometry so a few thousand records exercise every layer."""
    return EngineConfig(
        memtable_limit=32 * 1024,
        sst_target_size=32 * 1024,
        merge_buffer_size=8 * 1024,
        base_level_bytes=128 * 1024,
        l0_compaction_trigger=2,
        io_backend="sync",
        ledger_sweep_max_age=30.0,
    )


@pytest.fixture
def sim_config(tiny_config):
    return tiny_config.with_overrides(
        io_backend="sim",
        sim_write_latency_us_per_mib=200.0,
        sim_fsync_latency_us=1000.0,
        sim_fsync_latency_us_per_mib=5000.0,
    )
