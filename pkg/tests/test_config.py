import pytest

from drainsim.cli import default_config_path
from drainsim.config import (ConfigError, SocConfig, dump_config, load_config, parse_config_text,
                             parse_size, to_dict)


def test_shipped_default_file_equals_builtin_defaults():
    assert to_dict(load_config(default_config_path())) == to_dict(SocConfig())
    assert load_config(default_config_path()).fingerprint() == SocConfig().fingerprint()


def test_dump_round_trips():
    cfg = load_config(None, ["memctrl.policy=read_priority", "mapping.channel=[8,9]", "spy.use_flush=true"])
    again = parse_config_text(dump_config(cfg))
    assert to_dict(again) == to_dict(cfg)


def test_zero_ways_is_named():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[cache]\nllc_ways = 0\n")
    assert any("llc_ways" in e for e in exc.value.errors)


def test_all_errors_are_reported_together():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[cache]\nllc_ways = 0\n[covert]\nsecret_bits = 5\n[memctrl]\npolicy = lifo\n")
    text = "\n".join(exc.value.errors)
    assert "llc_ways" in text and "secret_bits" in text and "lifo" in text


def test_missing_sections_fall_back_to_defaults():
    cfg = parse_config_text("[dram]\nrow_hit_cycles = 16\n")
    assert cfg.dram.row_hit_cycles == 16
    assert to_dict(cfg)["cache"] == to_dict(SocConfig())["cache"]


def test_syntax_error_points_at_the_line():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[dram]\nrow_hit_cycles = 16\nthis line is junk\n", "x.ini")
    assert "x.ini" in exc.value.errors[0] and "line 3" in exc.value.errors[0]


def test_unknown_keys_and_sections_are_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("[dram]\nspeed = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(None, ["gpu.cores=3"])
    with pytest.raises(ConfigError, match="no such file"):
        load_config("/nonexistent.ini")


def test_override_equals_file_setting(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[memctrl]\nwrite_buffer_entries = 32\n")
    a = load_config(p)
    b = load_config(None, ["memctrl.write_buffer_entries=32"])
    assert to_dict(a) == to_dict(b) and a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != SocConfig().fingerprint()


def test_sizes():
    assert parse_size("16MiB") == 16 << 20
    assert parse_size("512 k") == 512 << 10
    with pytest.raises(ValueError):
        parse_size("lots")


def test_dependent_mapping_is_rejected():
    with pytest.raises(ConfigError, match="mapping"):
        load_config(None, ["mapping.ba1=[16,19]"])
