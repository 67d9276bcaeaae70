import pytest

from routelab.config import ModelConfig, build_pattern, parse_config_text, validate_pattern
from routelab.routing import ConfigError


def test_defaults_validate():
    cfg = ModelConfig()
    cfg.validate()
    assert cfg.gamma == 0.5
    assert cfg.prior_factor == 0.0625
    assert (cfg.lambda_pred, cfg.lambda_causal, cfg.lambda_g_reg) == (0.05, 0.01, 0.001)
    assert cfg.seed == 42


def test_pattern_building():
    assert build_pattern("dense", 4) == ("dense",) * 4
    assert build_pattern("mod", 4) == ("dense", "mod", "dense", "mod")
    assert build_pattern("sdt", 4) == ("decision", "dynamic", "decision", "dynamic")
    assert build_pattern("stt_fixed", 4) == ("dense", "stt", "dense", "stt")
    assert build_pattern("stt_threshold", 2) == ("dense", "stt")


def test_pattern_odd_layers_rejected():
    with pytest.raises(ConfigError):
        build_pattern("sdt", 5)


def test_dynamic_requires_decision_neighbour():
    with pytest.raises(ConfigError):
        validate_pattern(("dense", "dynamic"))
    with pytest.raises(ConfigError):
        validate_pattern(("decision", "dense"))
    validate_pattern(("decision", "dynamic", "dense"))


def test_unknown_layer_kind_rejected():
    with pytest.raises(ConfigError):
        validate_pattern(("dense", "quantum"))


def test_config_text_round_trip():
    cfg = ModelConfig(d=32, variant="stt_threshold", gamma=0.25, learnable_betas=True)
    text = cfg.to_text()
    cfg2 = ModelConfig.from_text(text)
    assert cfg2.to_text() == text
    assert cfg2.d == 32 and cfg2.variant == "stt_threshold"
    assert cfg2.learnable_betas is True


def test_config_file_parsing_with_comments():
    parsed = parse_config_text("""
    # comment line
    d = 48   # trailing comment
    variant = sdt

    pattern = decision,dynamic
    """)
    assert parsed == {"d": "48", "variant": "sdt", "pattern": "decision,dynamic"}
    cfg = ModelConfig()
    cfg.apply_overrides(parsed)
    assert cfg.d == 48
    assert cfg.pattern == ("decision", "dynamic")


def test_unknown_key_rejected():
    cfg = ModelConfig()
    with pytest.raises(ConfigError):
        cfg.apply_overrides({"warp_factor": "9"})


def test_malformed_line_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("this is not a key value line")


def test_validation_catches_bad_values():
    for bad in (dict(gamma=0.0), dict(gamma=1.5), dict(warmup_frac=1.0),
                dict(lambda_pred=-0.1), dict(heads=3), dict(variant="mystery"),
                dict(ma_decay=1.0), dict(g_reg_mode="sometimes")):
        cfg = ModelConfig(**bad)
        with pytest.raises(ConfigError):
            cfg.validate()


def test_explicit_pattern_overrides_variant():
    cfg = ModelConfig(variant="dense", pattern=("dense", "stt"))
    assert cfg.resolved_pattern() == ("dense", "stt")


def test_routing_mode_by_variant():
    assert ModelConfig(variant="stt_threshold").routing_mode() == "threshold"
    assert ModelConfig(variant="stt_fixed").routing_mode() == "fixed"
    assert ModelConfig(variant="sdt").routing_mode() == "fixed"
