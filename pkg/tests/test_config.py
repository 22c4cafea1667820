import pytest

from dualkv import ConfigError, SimConfig, parse_config_text


def test_defaults_validate():
    SimConfig().validate()


def test_copy_applies_overrides():
    cfg = SimConfig().copy(seed=9, compaction_workers=4)
    assert cfg.seed == 9
    assert cfg.compaction_workers == 4
    assert cfg.memtable_bytes == SimConfig().memtable_bytes


@pytest.mark.parametrize("bad", [
    dict(policy="fastest"),
    dict(rollback_mode="sometimes"),
    dict(l0_stop_files=2, l0_slowdown_files=4),
    dict(pending_soft_bytes=2, pending_hard_bytes=1),
    dict(max_immutable_memtables=0),
    dict(flush_workers=0),
    dict(dev_highwater_ratio=0.0),
    dict(disaggregation_point=0),
    dict(bus_capacity_bps=0),
])
def test_invalid_values_are_rejected(bad):
    with pytest.raises(ConfigError):
        SimConfig(**bad)


def test_file_text_roundtrip():
    cfg = SimConfig(seed=7, policy="baseline-slowdown", memtable_bytes=123456,
                    dev_highwater_ratio=0.5)
    again = parse_config_text(cfg.to_file_text())
    assert again == cfg


def test_parse_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError):
        parse_config_text("not_a_knob = 1\n")
    with pytest.raises(ConfigError):
        parse_config_text("memtable_bytes = soon\n")


def test_parse_ignores_comments_and_blank_lines():
    cfg = parse_config_text("# comment\n\nseed = 3\n")
    assert cfg.seed == 3


def test_cpu_cost_auto_calibrates_to_device_rate():
    cfg = SimConfig()
    # auto mode: merging one byte costs as much time as moving two bytes
    # through the device, one read plus one write
    assert cfg.cpu_us_per_byte == pytest.approx(2_000_000 / cfg.device_capacity_bps)
    explicit = SimConfig(compaction_cpu_us_per_byte=0.5)
    assert explicit.cpu_us_per_byte == 0.5
