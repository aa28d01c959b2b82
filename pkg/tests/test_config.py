"""Config parsing, schema resolution, and canonical echoing."""

import pytest

from gmmcv.config import ConfigError, Key, format_config, parse_config_text, resolve

SCHEMA = {
    "experiment": Key("str", required=True),
    "rng_seed": Key("int", default=0),
    "tolerance": Key("float", default=1e-6),
    "verbose": Key("bool", default=False),
    "t_list": Key("int_list", default=(100,)),
    "scales": Key("float_list", default=(1.0, 2.0)),
    "labels": Key("str_list", default=("1,2|3",)),
}


def test_parse_ignores_comments_and_blanks():
    raw = parse_config_text(
        """
        # leading comment
        experiment = iv_study   # trailing comment
        rng_seed = 7

        """
    )
    assert raw == {"experiment": "iv_study", "rng_seed": "7"}


def test_parse_rejects_duplicates_and_malformed_lines():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("a = 1\na = 2\n")
    with pytest.raises(ConfigError, match="expected"):
        parse_config_text("just words\n")
    with pytest.raises(ConfigError, match="empty key"):
        parse_config_text("= 3\n")


def test_resolve_applies_defaults_and_types():
    cfg = resolve({"experiment": "iv_study"}, SCHEMA)
    assert cfg["experiment"] == "iv_study"
    assert cfg["rng_seed"] == 0
    assert cfg["tolerance"] == 1e-6
    assert cfg["verbose"] is False
    assert cfg["t_list"] == (100,)


def test_resolve_parses_each_type():
    raw = {
        "experiment": "x",
        "rng_seed": "12",
        "tolerance": "0.5",
        "verbose": "yes",
        "t_list": "100, 200, 400",
        "scales": "1.5, 2.5",
        "labels": "1|2|3; 1,2,3",
    }
    cfg = resolve(raw, SCHEMA)
    assert cfg["rng_seed"] == 12
    assert cfg["tolerance"] == 0.5
    assert cfg["verbose"] is True
    assert cfg["t_list"] == (100, 200, 400)
    assert cfg["scales"] == (1.5, 2.5)
    # semicolon separation lets items carry commas (partition labels)
    assert cfg["labels"] == ("1|2|3", "1,2,3")


def test_resolve_hard_errors():
    with pytest.raises(ConfigError, match="unknown config keys"):
        resolve({"experiment": "x", "typo_key": "1"}, SCHEMA)
    with pytest.raises(ConfigError, match="missing required"):
        resolve({}, SCHEMA)
    with pytest.raises(ConfigError, match="cannot parse"):
        resolve({"experiment": "x", "rng_seed": "many"}, SCHEMA)
    with pytest.raises(ConfigError, match="cannot parse"):
        resolve({"experiment": "x", "verbose": "maybe"}, SCHEMA)


def test_bool_spellings():
    for text, expected in [
        ("true", True),
        ("1", True),
        ("on", True),
        ("False", False),
        ("no", False),
        ("0", False),
    ]:
        assert resolve({"experiment": "x", "verbose": text}, SCHEMA)["verbose"] is expected


def test_format_round_trip_is_idempotent():
    raw = {
        "experiment": "iv_study",
        "t_list": "100,400",
        "verbose": "on",
        "labels": "1,2|3; 1|2|3",
    }
    cfg = resolve(raw, SCHEMA)
    echo = format_config(cfg, SCHEMA)
    # echo parses back to an identical resolved config
    cfg2 = resolve(parse_config_text(echo), SCHEMA)
    assert cfg2 == cfg
    assert format_config(cfg2, SCHEMA) == echo
    # sorted, one key per line, newline-terminated
    keys = [line.split(" = ")[0] for line in echo.strip().splitlines()]
    assert keys == sorted(keys)
    assert echo.endswith("\n")


def test_format_value_spellings():
    cfg = resolve({"experiment": "x"}, SCHEMA)
    echo = format_config(cfg, SCHEMA)
    assert "verbose = false" in echo
    assert "scales = 1.0, 2.0" in echo
    assert "labels = 1,2|3" in echo
