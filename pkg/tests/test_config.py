"""Tests for config loading, validation and env overrides."""

import json

import pytest

from ttnf_tool.config import (
    SCHEMAS,
    BenchConfig,
    DenoiseSweepConfig,
    FitConfig,
    RenderConfigFile,
    build_config,
    config_to_dict,
    find_config_files,
    load_config,
)
from ttnf_tool.errors import EXIT_CONFIG, ConfigError


def _write(tmp_path, text, name="run.json"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoad:
    def test_defaults_without_file(self):
        cfg = load_config(None, DenoiseSweepConfig)
        assert cfg == DenoiseSweepConfig()
        assert cfg.modes == [4] * 10
        assert cfg.methods == ["tt_svd", "contraction_gd", "sampling_v2", "sampling_v3"]

    def test_partial_file(self, tmp_path):
        path = _write(tmp_path, '{\n  "steps": 12,\n  "scales": [0.1]\n}\n')
        cfg = load_config(path, DenoiseSweepConfig)
        assert cfg.steps == 12
        assert cfg.scales == [0.1]
        assert cfg.batch == DenoiseSweepConfig().batch

    def test_unknown_key_reports_its_line(self, tmp_path):
        path = _write(tmp_path, '{\n  "steps": 12,\n  "bogus": 1\n}\n')
        with pytest.raises(ConfigError) as info:
            load_config(path, DenoiseSweepConfig)
        assert str(info.value) == "line 3: unknown key 'bogus'"
        assert info.value.line == 3

    def test_wrong_type_reports_its_line(self, tmp_path):
        path = _write(tmp_path, '{\n  "modes": [4, 4],\n  "batch": "large"\n}\n')
        with pytest.raises(ConfigError, match=r"^line 3: 'batch' must be int"):
            load_config(path, DenoiseSweepConfig)

    def test_unknown_choice_reports_its_line(self, tmp_path):
        path = _write(tmp_path, '{\n  "steps": 12,\n  "methods": ["tt_svd", "magic"]\n}\n')
        with pytest.raises(ConfigError) as info:
            load_config(path, DenoiseSweepConfig)
        assert str(info.value) == (
            "line 3: 'methods' must be one of tt_svd, contraction_gd, sampling_v2, sampling_v3, got 'magic'"
        )
        assert info.value.line == 3

    @pytest.mark.parametrize(
        "schema, key, value",
        [
            (DenoiseSweepConfig, "minibatch", "stratified"),
            (DenoiseSweepConfig, "init", "zeros"),
            (BenchConfig, "kinds", ["v2", "v4"]),
            (FitConfig, "sampler", "v9"),
            (RenderConfigFile, "image_format", "gif"),
        ],
    )
    def test_choice_fields(self, tmp_path, schema, key, value):
        path = _write(tmp_path, "{\n" + f'  "{key}": {json.dumps(value)}\n' + "}\n")
        with pytest.raises(ConfigError, match=rf"^line 2: '{key}' must be one of ") as info:
            load_config(path, schema, env=False)
        assert info.value.line == 2

    def test_bool_is_not_an_int(self):
        with pytest.raises(ConfigError):
            build_config(DenoiseSweepConfig, {"steps": True})

    def test_int_is_accepted_as_float(self):
        cfg = build_config(DenoiseSweepConfig, {"lr_max": 1, "scales": [0, 0.5]})
        assert cfg.lr_max == 1.0
        assert isinstance(cfg.lr_max, float)
        assert cfg.scales == [0, 0.5]

    def test_optional_list(self):
        assert build_config(BenchConfig, {"ranks": None}).ranks is None
        assert build_config(BenchConfig, {"ranks": [2, 4]}).ranks == [2, 4]
        with pytest.raises(ConfigError):
            build_config(BenchConfig, {"ranks": [2, "4"]})

    def test_invalid_json(self, tmp_path):
        path = _write(tmp_path, '{\n  "steps": 12,\n  "batch":\n}\n')
        with pytest.raises(ConfigError, match=r"^line \d+: invalid JSON"):
            load_config(path, DenoiseSweepConfig)

    def test_top_level_must_be_an_object(self, tmp_path):
        with pytest.raises(ConfigError, match="JSON object"):
            load_config(_write(tmp_path, "[1, 2]"), DenoiseSweepConfig)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found") as info:
            load_config(tmp_path / "absent.json", FitConfig)
        assert info.value.exit_code == EXIT_CONFIG


class TestEnv:
    def test_override_beats_file(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TTNF_STEPS", "7")
        path = _write(tmp_path, '{"steps": 12}')
        assert load_config(path, DenoiseSweepConfig).steps == 7

    def test_list_override(self, monkeypatch):
        monkeypatch.setenv("TTNF_SEEDS", "[5, 6]")
        assert load_config(None, DenoiseSweepConfig).seeds == [5, 6]

    def test_string_override(self, monkeypatch):
        monkeypatch.setenv("TTNF_SYNTHETIC", "two_boxes")
        assert load_config(None, FitConfig).synthetic == "two_boxes"

    def test_bad_override_names_the_variable(self, monkeypatch):
        monkeypatch.setenv("TTNF_STEPS", "many")
        with pytest.raises(ConfigError, match="TTNF_STEPS") as info:
            load_config(None, DenoiseSweepConfig)
        assert info.value.line is None

    def test_bad_choice_override_names_the_variable(self, monkeypatch):
        monkeypatch.setenv("TTNF_SYNTHETIC", "teapot")
        with pytest.raises(ConfigError, match="TTNF_SYNTHETIC must be one of sphere, two_boxes, empty") as info:
            load_config(None, FitConfig)
        assert info.value.line is None

    def test_overrides_can_be_disabled(self, monkeypatch):
        monkeypatch.setenv("TTNF_STEPS", "7")
        assert load_config(None, DenoiseSweepConfig, env=False).steps == 1000


class TestShippedConfigs:
    @pytest.mark.parametrize("name", sorted(SCHEMAS))
    def test_configs_directory_is_valid(self, name, request):
        path = request.config.rootpath / "configs" / f"{name}.json"
        cfg = load_config(path, SCHEMAS[name], env=False)
        assert config_to_dict(cfg) == {**config_to_dict(SCHEMAS[name]()), **json.loads(path.read_text())}

    def test_find_config_files(self, tmp_path):
        _write(tmp_path, "{}", "b.json")
        _write(tmp_path, "{}", "a.json")
        _write(tmp_path, "", "notes.txt")
        assert [p.name for p in find_config_files(tmp_path)] == ["a.json", "b.json"]
