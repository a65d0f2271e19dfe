"""Key resolution, value coercion, and round-trips of the flat
key = value configuration format."""

import dataclasses

import pytest

from attrvit.config import (
    RunConfig,
    build_config,
    format_value,
    load_config,
    parse_text,
    parse_value,
    resolve_key,
    serialize_config,
    train_config_from_text,
    train_config_text,
)
from attrvit.encoder import ConfigError
from attrvit.train import TrainConfig


class TestParseText:
    def test_basic_lines(self):
        raw = parse_text("a.b = 1\n# comment\nc.d = hello  # trailing\n")
        assert raw == {"a.b": "1", "c.d": "hello"}

    def test_later_line_wins(self):
        raw = parse_text("k = 1\nk = 2\n")
        assert raw == {"k": "2"}

    def test_blank_lines_skipped(self):
        assert parse_text("\n\n   \n") == {}

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_text("a = 1\nnot a pair\n")


class TestParseValue:
    @pytest.mark.parametrize(
        "raw,like,expected",
        [
            ("3", 1, 3),
            ("-2", 1, -2),
            ("0.25", 1.0, 0.25),
            ("1e-3", 1.0, 1e-3),
            ("true", False, True),
            ("False", True, False),
            ("circle, square", ("a",), ("circle", "square")),
            ("hello", "x", "hello"),
        ],
    )
    def test_coercion(self, raw, like, expected):
        assert parse_value(raw, like, "k") == expected

    @pytest.mark.parametrize("raw,like", [("abc", 1), ("1.5.2", 1.0), ("yes", True)])
    def test_rejects(self, raw, like):
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_value(raw, like, "k")


class TestResolveKey:
    def test_qualified_passthrough(self):
        assert resolve_key("train.steps", "train") == "train.steps"

    def test_unknown_qualified(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            resolve_key("train.nope", "train")

    def test_unknown_bare(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            resolve_key("nope", "train")

    def test_unique_bare(self):
        assert resolve_key("steps", "eval") == "train.steps"

    def test_scope_preference(self):
        # image_size exists in data and encoder; the command decides.
        assert resolve_key("image_size", "gen") == "data.image_size"
        assert resolve_key("image_size", "train") == "encoder.image_size"

    def test_ambiguous_without_preference(self):
        # noise_seed only in eval, but seed is both data.seed and train.seed.
        with pytest.raises(ConfigError, match="ambiguous"):
            resolve_key("seed", "explain")

    def test_hidden_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            resolve_key("train.num_classes", "train")
        with pytest.raises(ConfigError, match="unknown config key"):
            resolve_key("num_classes", "train")


class TestBuildConfig:
    def test_defaults(self):
        cfg = build_config({})
        assert cfg == RunConfig()

    def test_derived_num_classes(self):
        cfg = build_config({"data.classes": "circle,square"})
        assert cfg.train.num_classes == 2

    def test_nested_sections_reach_train(self):
        cfg = build_config({"encoder.depth": "2", "loss.alpha": "0.25"})
        assert cfg.train.encoder.depth == 2
        assert cfg.train.loss.alpha == 0.25

    def test_section_validation_fires(self):
        with pytest.raises(ConfigError):
            build_config({"encoder.image_size": "65"})  # not divisible by patch


class TestLoadConfig:
    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("train.steps = 10\nencoder.depth = 2\n")
        cfg, explicit = load_config(path, ["steps=20"], command="train")
        assert cfg.train.steps == 20
        assert cfg.train.encoder.depth == 2
        assert set(explicit) == {"train.steps", "encoder.depth"}

    def test_override_without_equals(self):
        with pytest.raises(ConfigError, match="not key=value"):
            load_config(None, ["steps"], command="train")

    def test_no_file(self):
        cfg, explicit = load_config(None, [], command="train")
        assert cfg == RunConfig()
        assert explicit == {}


class TestSerializeRoundTrip:
    def test_serialize_parses_back(self):
        cfg = build_config(
            {
                "train.steps": "7",
                "loss.alpha": "0.30000000000000004",
                "data.classes": "circle,square",
                "eval.use_ema": "true",
            }
        )
        text = serialize_config(cfg)
        again = build_config({k: v for k, v in parse_text(text).items()})
        assert again == cfg

    def test_float_exactness(self):
        # repr-formatted floats survive the round trip bit-for-bit.
        cfg = build_config({"loss.alpha": format_value(0.1 + 0.2)})
        text = serialize_config(cfg)
        again = build_config(parse_text(text))
        assert again.train.loss.alpha == cfg.train.loss.alpha

    def test_every_line_is_key_value(self):
        for line in serialize_config(RunConfig()).splitlines():
            key, sep, _ = line.partition(" = ")
            assert sep and "." in key


class TestTrainConfigText:
    def test_round_trip(self):
        cfg = dataclasses.replace(TrainConfig(), steps=5, num_classes=4, seed=9)
        assert train_config_from_text(train_config_text(cfg)) == cfg

    def test_includes_derived_fields(self):
        assert "train.num_classes = 3" in train_config_text(TrainConfig())

    def test_foreign_sections_ignored(self):
        text = train_config_text(TrainConfig()) + "checkpoint.step = 12\n"
        assert train_config_from_text(text) == TrainConfig()

    def test_unknown_train_field_rejected(self):
        text = train_config_text(TrainConfig()) + "train.bogus = 1\n"
        with pytest.raises(ConfigError, match="unknown config key"):
            train_config_from_text(text)
