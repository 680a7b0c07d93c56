"""
設定ファイル管理

フラットな JSON オブジェクト（キー: スカラーまたはスカラーのリスト）を読み込み、
既定値 < 設定ファイル < コマンドラインフラグ の順で解決して RunConfig を作る。
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from . import __version__
from .error_handler import ConfigError, get_logger
from .evaluation import REMOVAL_MODES, default_fractions
from .iba import BETA_MODES, STATS_MODES, BottleneckConfig
from .baselines import IG_BASELINES, IGConfig, SurrogateConfig
from .model import ModelConfig
from .trainer import TrainConfig


METHODS = ("iba", "ig", "lime-lite", "random", "x-only")
TARGET_MODES = ("gold", "pred")

logger = get_logger(__name__)


class ConfigManager:
    """設定ファイル管理クラス"""

    def __init__(self, config_file_path: Optional[str] = None):
        """
        Args:
            config_file_path: 設定ファイルパス。未指定時は既定値のみを使用
        """
        self.config_file_path = config_file_path

    def get_default_config(self) -> Dict[str, Any]:
        """既定値"""
        return {
            "seed": 0,
            # パス
            "corpus": "data/corpus.jsonl",
            "checkpoint": "runs/model.ibak",
            "out": "runs",
            # 合成コーパス
            "corpus_size": 2000,
            # モデル
            "vocab_size": 256,
            "n_classes": 2,
            "d_model": 64,
            "n_layers": 4,
            "n_heads": 4,
            "d_ff": 128,
            "max_seq_len": 64,
            # 学習
            "epochs": 20,
            "batch_size": 32,
            "train_lr": 0.01,
            "momentum": 0.9,
            "clip_norm": 1.0,
            # IBA
            "layer": 1,
            "beta": 1e-5,
            "beta_mode": "fixed",
            "steps": 10,
            "lr": 1.0,
            "alpha_init": 5.0,
            "duplicates": 10,
            "stats_mode": "per-feature",
            "calibration_size": 200,
            # 比較手法
            "ig_steps": 10,
            "ig_baseline": "zero",
            "lime_samples": 100,
            "mask_prob": 0.3,
            "ridge": 1e-3,
            # 評価
            "methods": ["iba", "ig", "lime-lite", "random"],
            "fractions": default_fractions(),
            "target": "gold",
            "removal": "delete",
            "limit": None,
            "jobs": 1,
            "layers": [0, 1, 2, 3, 4],
            "betas": [1e-7, 1e-5, 1e-3, 1e-1],
        }

    def load_config(self) -> Dict[str, Any]:
        """
        設定ファイルを読み込む（ファイル未指定時は空）

        Raises:
            ConfigError: ファイルがない、JSON が不正、未知のキーや入れ子の値がある場合
        """
        if self.config_file_path is None:
            return {}
        path = Path(self.config_file_path)
        if not path.exists():
            raise ConfigError(f"設定ファイルが見つかりません: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"設定ファイルの JSON が不正です: {path}: {e.msg} (line {e.lineno})") from None

        if not isinstance(config, dict):
            raise ConfigError("設定ファイルは JSON オブジェクトである必要があります")
        defaults = self.get_default_config()
        unknown = sorted(k for k in config if k not in defaults)
        if unknown:
            raise ConfigError(f"未知の設定キーです: {', '.join(unknown)}")
        for key, value in config.items():
            if isinstance(value, dict) or (isinstance(value, list) and any(isinstance(v, (dict, list)) for v in value)):
                raise ConfigError(f"設定値は入れ子にできません: {key}")
        logger.info(f"設定ファイルを読み込みました: {path}")
        return config

    def save_config(self, config: Mapping[str, Any], path: Optional[str] = None) -> Path:
        """設定をファイルに保存する"""
        target = Path(path or self.config_file_path or "config.json")
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8") as f:
            json.dump(dict(config), f, indent=2, ensure_ascii=False)
            f.write("\n")
        return target

    def validate_config(self, config: Mapping[str, Any]) -> Tuple[bool, List[str]]:
        """
        設定値の妥当性を検証する

        Returns:
            (検証結果, エラーメッセージのリスト)
        """
        errors: List[str] = []

        def is_int(value) -> bool:
            return isinstance(value, int) and not isinstance(value, bool)

        def is_number(value) -> bool:
            return isinstance(value, (int, float)) and not isinstance(value, bool)

        for key in ("seed", "corpus_size", "vocab_size", "n_classes", "d_model", "n_layers", "n_heads",
                    "d_ff", "max_seq_len", "epochs", "batch_size", "layer", "steps", "duplicates",
                    "calibration_size", "ig_steps", "lime_samples", "jobs"):
            if key in config and not is_int(config[key]):
                errors.append(f"{key} は整数である必要があります")
        for key in ("train_lr", "momentum", "clip_norm", "beta", "lr", "alpha_init", "mask_prob", "ridge"):
            if key in config and not is_number(config[key]):
                errors.append(f"{key} は数値である必要があります")
        for key in ("corpus", "checkpoint", "out"):
            if key in config and not isinstance(config[key], str):
                errors.append(f"{key} は文字列である必要があります")
        if errors:
            return False, errors

        def positive(key: str, minimum: float = 1) -> None:
            if key in config and config[key] < minimum:
                errors.append(f"{key} は {minimum} 以上である必要があります: {config[key]}")

        for key in ("vocab_size", "n_classes", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len",
                    "batch_size", "steps", "duplicates", "calibration_size", "ig_steps", "jobs"):
            positive(key)
        for key in ("seed", "corpus_size", "epochs", "layer"):
            positive(key, 0)
        if "beta" in config and not config["beta"] > 0:
            errors.append(f"beta は正である必要があります: {config['beta']}")
        if "lr" in config and not config["lr"] > 0:
            errors.append(f"lr は正である必要があります: {config['lr']}")
        if "train_lr" in config and not config["train_lr"] > 0:
            errors.append(f"train_lr は正である必要があります: {config['train_lr']}")
        if "clip_norm" in config and not config["clip_norm"] > 0:
            errors.append(f"clip_norm は正である必要があります: {config['clip_norm']}")
        if "mask_prob" in config and not 0 < config["mask_prob"] < 1:
            errors.append(f"mask_prob は (0, 1) の範囲です: {config['mask_prob']}")
        if "ridge" in config and not config["ridge"] > 0:
            errors.append(f"ridge は正である必要があります: {config['ridge']}")
        if "momentum" in config and not 0 <= config["momentum"] < 1:
            errors.append(f"momentum は [0, 1) の範囲です: {config['momentum']}")
        if "d_model" in config and "n_heads" in config and config["d_model"] % config["n_heads"] != 0:
            errors.append(f"d_model ({config['d_model']}) は n_heads ({config['n_heads']}) で割り切れる必要があります")
        if "layer" in config and "n_layers" in config and config["layer"] > config["n_layers"]:
            errors.append(f"layer は 0..{config['n_layers']} の範囲です: {config['layer']}")
        if "lime_samples" in config and config["lime_samples"] < 2:
            errors.append(f"lime_samples は 2 以上である必要があります: {config['lime_samples']}")

        choices = {
            "beta_mode": BETA_MODES, "stats_mode": STATS_MODES, "ig_baseline": IG_BASELINES,
            "target": TARGET_MODES, "removal": REMOVAL_MODES,
        }
        for key, allowed in choices.items():
            if key in config and config[key] not in allowed:
                errors.append(f"{key} は {', '.join(allowed)} のいずれかです: {config[key]}")

        if "methods" in config:
            methods = config["methods"]
            if not isinstance(methods, list) or not methods:
                errors.append("methods は1つ以上の手法名のリストである必要があります")
            else:
                unknown = [m for m in methods if m not in METHODS]
                if unknown:
                    errors.append(f"未知の手法です: {', '.join(map(str, unknown))} (有効: {', '.join(METHODS)})")
                if len(set(methods)) != len(methods):
                    errors.append("methods に重複があります")

        if "fractions" in config:
            fractions = config["fractions"]
            if not isinstance(fractions, list) or not all(is_number(f) for f in fractions):
                errors.append("fractions は数値のリストである必要があります")
            elif len(fractions) < 2 or fractions[0] != 0 or fractions[-1] != 1:
                errors.append("fractions は 0 で始まり 1 で終わる必要があります")
            elif any(b <= a for a, b in zip(fractions, fractions[1:])):
                errors.append("fractions は狭義単調増加である必要があります")

        if "limit" in config and config["limit"] is not None and (not is_int(config["limit"]) or config["limit"] < 1):
            errors.append(f"limit は 1 以上の整数か null です: {config['limit']}")
        if "layers" in config and (not isinstance(config["layers"], list) or not all(is_int(v) for v in config["layers"])):
            errors.append("layers は整数のリストである必要があります")
        if "betas" in config:
            betas = config["betas"]
            if not isinstance(betas, list) or not all(is_number(v) and v > 0 for v in betas):
                errors.append("betas は正の数のリストである必要があります")

        return len(errors) == 0, errors

    def resolve(self, file_values: Optional[Mapping[str, Any]] = None,
                flag_overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """
        既定値 < 設定ファイル < フラグ の順で値を解決する

        Raises:
            ConfigError: 解決後の設定が不正な場合
        """
        values = self.get_default_config()
        values.update(file_values if file_values is not None else self.load_config())
        values.update({k: v for k, v in (flag_overrides or {}).items() if v is not None})
        is_valid, errors = self.validate_config(values)
        if not is_valid:
            raise ConfigError("; ".join(errors))
        return RunConfig(values)


@dataclass(frozen=True)
class RunConfig:
    """解決済みの実行設定"""
    values: Dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def to_dict(self) -> Dict[str, Any]:
        """成果物に埋め込む設定（キー順固定）"""
        return {key: self.values[key] for key in sorted(self.values)}

    def provenance(self) -> Dict[str, Any]:
        return {"config": self.to_dict(), "version": __version__}

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            vocab_size=v["vocab_size"], n_classes=v["n_classes"], d_model=v["d_model"],
            n_layers=v["n_layers"], n_heads=v["n_heads"], d_ff=v["d_ff"], max_seq_len=v["max_seq_len"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(epochs=v["epochs"], batch_size=v["batch_size"], lr=float(v["train_lr"]),
                           momentum=float(v["momentum"]), clip_norm=float(v["clip_norm"]), seed=v["seed"])

    def bottleneck_config(self, layer: Optional[int] = None, beta: Optional[float] = None) -> BottleneckConfig:
        v = self.values
        return BottleneckConfig(
            layer=v["layer"] if layer is None else layer,
            beta=float(v["beta"] if beta is None else beta),
            steps=v["steps"], lr=float(v["lr"]), alpha_init=float(v["alpha_init"]),
            duplicates=v["duplicates"], seed=v["seed"], beta_mode=v["beta_mode"],
        )

    def ig_config(self) -> IGConfig:
        return IGConfig(steps=self.values["ig_steps"], baseline=self.values["ig_baseline"])

    def surrogate_config(self) -> SurrogateConfig:
        v = self.values
        return SurrogateConfig(n_samples=v["lime_samples"], mask_prob=float(v["mask_prob"]),
                               ridge=float(v["ridge"]), seed=v["seed"])
