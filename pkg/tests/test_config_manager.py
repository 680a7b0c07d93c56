"""
設定ファイル管理システム テストケース
"""
import json
import os
import shutil
import tempfile
from pathlib import Path

import pytest

from src import __version__
from src.config_manager import METHODS, ConfigManager, RunConfig
from src.error_handler import ConfigError


DEFAULT_CONFIG_FILE = Path(__file__).resolve().parent.parent / "config" / "default_config.json"


class TestConfigManager:
    """ConfigManager クラスのテストケース"""

    def setup_method(self):
        """各テストメソッドの実行前に呼ばれるセットアップ"""
        self.temp_dir = tempfile.mkdtemp()
        self.config_file = os.path.join(self.temp_dir, "test_config.json")
        self.manager = ConfigManager(self.config_file)

    def teardown_method(self):
        """各テストメソッドの実行後に呼ばれるクリーンアップ"""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _write(self, data):
        with open(self.config_file, "w", encoding="utf-8") as f:
            json.dump(data, f)

    # TC-001: ConfigManager初期化
    def test_config_manager_initialization(self):
        """ConfigManagerが正常に初期化される"""
        assert ConfigManager().config_file_path is None
        assert self.manager.config_file_path == self.config_file

    # TC-002: デフォルト設定取得
    def test_get_default_config(self):
        """デフォルト設定が正しく返され、検証を通る"""
        default_config = self.manager.get_default_config()
        assert default_config["layer"] == 1
        assert default_config["beta"] == 1e-5
        assert default_config["steps"] == 10
        assert default_config["duplicates"] == 10
        assert 0.11 in default_config["fractions"]
        assert set(default_config["methods"]) <= set(METHODS)
        assert self.manager.validate_config(default_config) == (True, [])

    # TC-003: 同梱の設定ファイルは既定値と一致する
    def test_bundled_default_config_matches(self):
        bundled = ConfigManager(str(DEFAULT_CONFIG_FILE)).load_config()
        assert bundled == self.manager.get_default_config()

    # TC-101: 正常な設定ファイル読み込み
    def test_load_valid_config_file(self):
        self._write({"layer": 2, "beta": 0.001, "methods": ["iba", "random"]})
        assert self.manager.load_config() == {"layer": 2, "beta": 0.001, "methods": ["iba", "random"]}

    def test_load_without_file(self):
        assert ConfigManager().load_config() == {}

    # TC-102: ファイルがない・不正な JSON
    def test_missing_file(self):
        with pytest.raises(ConfigError):
            self.manager.load_config()

    def test_invalid_json(self):
        with open(self.config_file, "w", encoding="utf-8") as f:
            f.write('{"layer": 1,')
        with pytest.raises(ConfigError):
            self.manager.load_config()

    def test_not_an_object(self):
        self._write([1, 2, 3])
        with pytest.raises(ConfigError):
            self.manager.load_config()

    # TC-103: 未知のキー・入れ子の値は拒否
    def test_unknown_key(self):
        self._write({"layer": 1, "icon_size": 32})
        with pytest.raises(ConfigError, match="icon_size"):
            self.manager.load_config()

    def test_nested_value(self):
        self._write({"layer": {"value": 1}})
        with pytest.raises(ConfigError):
            self.manager.load_config()

    # TC-201: 設定保存
    def test_save_and_reload(self):
        config = {"seed": 3, "layer": 2}
        path = self.manager.save_config(config)
        assert path == Path(self.config_file)
        assert self.manager.load_config() == config


class TestValidation:
    """validate_config のテストケース"""

    def setup_method(self):
        self.manager = ConfigManager()
        self.defaults = self.manager.get_default_config()

    def _errors(self, **changes):
        config = dict(self.defaults)
        config.update(changes)
        return self.manager.validate_config(config)

    @pytest.mark.parametrize("changes", [
        dict(beta=0.0),
        dict(beta=-1e-5),
        dict(steps=0),
        dict(layer=5),
        dict(layer=1.5),
        dict(seed=True),
        dict(d_model=10),
        dict(mask_prob=1.0),
        dict(momentum=1.0),
        dict(clip_norm=0.0),
        dict(stats_mode="global"),
        dict(beta_mode="auto"),
        dict(removal="mask"),
        dict(target="top"),
        dict(methods=[]),
        dict(methods=["iba", "shap"]),
        dict(methods=["iba", "iba"]),
        dict(fractions=[0.1, 1.0]),
        dict(fractions=[0.0, 0.5, 0.4, 1.0]),
        dict(limit=0),
        dict(betas=[0.1, -1.0]),
        dict(layers=[0, "1"]),
        dict(corpus=3),
    ])
    def test_invalid_values(self, changes):
        is_valid, errors = self._errors(**changes)
        assert not is_valid
        assert errors

    def test_unknown_method_lists_valid_methods(self):
        _, errors = self._errors(methods=["shap"])
        assert any("iba" in e and "lime-lite" in e for e in errors)

    def test_limit_may_be_null(self):
        assert self._errors(limit=None) == (True, [])


class TestResolve:
    """既定値 < 設定ファイル < フラグ"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()
        self.config_file = os.path.join(self.temp_dir, "run.json")
        with open(self.config_file, "w", encoding="utf-8") as f:
            json.dump({"layer": 2, "beta": 0.01, "steps": 4}, f)
        self.manager = ConfigManager(self.config_file)

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    # TC-301: 優先順位
    def test_precedence(self):
        config = self.manager.resolve(flag_overrides={"beta": 0.5, "layer": None})
        assert config["layer"] == 2
        assert config["beta"] == 0.5
        assert config["steps"] == 4
        assert config["duplicates"] == 10

    def test_invalid_result_rejected(self):
        with pytest.raises(ConfigError):
            self.manager.resolve(flag_overrides={"beta": 0.0})

    def test_provenance(self):
        config = self.manager.resolve()
        provenance = config.provenance()
        assert provenance["version"] == __version__
        assert list(provenance["config"]) == sorted(provenance["config"])
        json.dumps(provenance)

    # TC-302: 各モジュールの設定オブジェクトへの変換
    def test_component_configs(self):
        config = self.manager.resolve(flag_overrides={"duplicates": 3, "ig_steps": 7, "lime_samples": 50})
        bottleneck = config.bottleneck_config()
        assert (bottleneck.layer, bottleneck.beta, bottleneck.steps, bottleneck.duplicates) == (2, 0.01, 4, 3)
        assert config.bottleneck_config(layer=0, beta=1.0).layer == 0
        assert config.ig_config().steps == 7
        assert config.surrogate_config().n_samples == 50
        assert config.model_config().n_layers == 4
        assert config.train_config().lr == 0.01
        assert config.train_config().clip_norm == 1.0

    def test_run_config_accessors(self):
        config = RunConfig({"seed": 1})
        assert config["seed"] == 1
        assert config.get("missing", 5) == 5
