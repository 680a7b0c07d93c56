"""
CLI コマンドの処理本体（データ準備、手法の構築、評価の実行）

ファイルへの書き出しは cli 側で行い、ここでは成果物の内容だけを組み立てる。
"""
import threading
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .attribution import AttributeFn, AttributionMap, instance_rng
from .baselines import integrated_gradients, lime_lite, random_attribution
from .config_manager import METHODS, RunConfig
from .corpus import load_corpus, split_corpus
from .error_handler import InputError, RangeError, UsageError, get_logger
from .evaluation import (
    AttributionCache, DegradationCurve, NormalizedCurve, ProbabilityCache, SweepReport, absolute_drop_at,
    beta_sweep, curves_to_csv, degradation_curve, layer_sweep, normalize_curves,
)
from .iba import NoiseStats, estimate_noise_stats, iba_attribution, x_only_attribution
from .model import Instance, ModelCheckpoint, predict_proba, tokenize
from .trainer import to_instances


BOTTLENECK_METHODS = ("iba", "x-only")

logger = get_logger(__name__)


@dataclass
class DataSplits:
    train: List[Instance]
    validation: List[Instance]
    test: List[Instance]


def load_splits(run_config: RunConfig, checkpoint: ModelCheckpoint) -> DataSplits:
    """コーパスを分割し、チェックポイントの語彙でトークン化する"""
    train, validation, test = split_corpus(load_corpus(run_config["corpus"]), run_config["seed"])
    max_seq_len = checkpoint.config.max_seq_len
    return DataSplits(
        train=to_instances(train, checkpoint.vocab, max_seq_len),
        validation=to_instances(validation, checkpoint.vocab, max_seq_len),
        test=to_instances(test, checkpoint.vocab, max_seq_len),
    )


def evaluation_instances(splits: DataSplits, limit: Optional[int]) -> List[Instance]:
    instances = splits.test if limit is None else splits.test[:limit]
    if not instances:
        raise InputError("評価用インスタンスがありません（コーパスが小さすぎます）")
    return instances


def resolve_targets(checkpoint: ModelCheckpoint, instances: Sequence[Instance], mode: str) -> List[int]:
    """gold: 正解ラベル / pred: モデルの予測クラス"""
    if mode == "gold":
        missing = [i for i, inst in enumerate(instances) if inst.label is None]
        if missing:
            raise InputError(f"正解ラベルのないインスタンスがあります: {missing[:5]}")
        return [int(inst.label) for inst in instances]
    token_ids = np.stack([inst.token_ids for inst in instances])
    mask = np.stack([inst.mask for inst in instances])
    return [int(c) for c in predict_proba(checkpoint, token_ids, mask).argmax(axis=1)]


class MethodFactory:
    """手法名から寄与度関数を作る。ノイズ統計は層ごとに一度だけ推定する"""

    def __init__(self, checkpoint: ModelCheckpoint, run_config: RunConfig, calibration: Sequence[Instance]):
        self.checkpoint = checkpoint
        self.run_config = run_config
        self.calibration = list(calibration)
        self._stats: Dict[int, NoiseStats] = {}
        self._lock = threading.Lock()

    def noise_stats(self, layer: int) -> NoiseStats:
        with self._lock:
            if layer not in self._stats:
                self._stats[layer] = estimate_noise_stats(
                    self.checkpoint, self.calibration, layer,
                    mode=self.run_config["stats_mode"], seed=self.run_config["seed"],
                )
            return self._stats[layer]

    def build(self, name: str) -> AttributeFn:
        """
        Raises:
            UsageError: 未知の手法名
        """
        checkpoint, cfg = self.checkpoint, self.run_config
        seed = cfg["seed"]

        if name == "iba":
            config = cfg.bottleneck_config()
            stats = self.noise_stats(config.layer)
            return lambda index, inst, target, rng: iba_attribution(checkpoint, inst, target, config, stats, rng)
        if name == "x-only":
            config = cfg.bottleneck_config()
            stats = self.noise_stats(config.layer)
            return lambda index, inst, target, rng: x_only_attribution(checkpoint, inst, target, config, stats)
        if name == "ig":
            ig_config = cfg.ig_config()
            return lambda index, inst, target, rng: integrated_gradients(checkpoint, inst, target, ig_config, seed)
        if name == "lime-lite":
            surrogate = cfg.surrogate_config()
            return lambda index, inst, target, rng: lime_lite(checkpoint, inst, target, surrogate, rng)
        if name == "random":
            vocab = checkpoint.vocab
            return lambda index, inst, target, rng: random_attribution(inst, vocab, seed, rng, target=target)
        raise UsageError(f"未知の手法です: {name} (有効: {', '.join(METHODS)})")


def check_method(name: str) -> str:
    if name not in METHODS:
        raise UsageError(f"未知の手法です: {name} (有効: {', '.join(METHODS)})")
    return name


# ======================================================================
# attribute
# ======================================================================

def select_instance(run_config: RunConfig, checkpoint: ModelCheckpoint, splits: DataSplits,
                    index: int, text: Optional[str]) -> Instance:
    """--text があればそれを、なければテスト分割の index 番目を使う"""
    if text is not None:
        return tokenize(text, checkpoint.vocab, checkpoint.config.max_seq_len)
    if not 0 <= index < len(splits.test):
        raise RangeError(f"index は 0..{len(splits.test) - 1} の範囲で指定してください: {index}")
    return splits.test[index]


def attribute_one(run_config: RunConfig, checkpoint: ModelCheckpoint, factory: MethodFactory, method: str,
                  instance: Instance, index: int) -> AttributionMap:
    """1インスタンスの寄与度（乱数列は (seed, index) から）"""
    check_method(method)
    mode = run_config["target"] if instance.label is not None else "pred"
    target = resolve_targets(checkpoint, [instance], mode)[0]
    attribute = factory.build(method)
    return attribute(index, instance, target, instance_rng(run_config["seed"], index))


# ======================================================================
# degrade
# ======================================================================

@dataclass
class DegradationResult:
    curves: List[DegradationCurve]
    normalized: List[NormalizedCurve]
    drops: Dict[str, float]

    def curves_csv(self) -> str:
        return curves_to_csv(self.curves, self.normalized)


def run_degradation(run_config: RunConfig, checkpoint: ModelCheckpoint, factory: MethodFactory,
                    instances: Sequence[Instance], methods: Sequence[str]) -> DegradationResult:
    """手法ごとに劣化曲線を作り（順次）、まとめて正規化する"""
    if not methods:
        raise UsageError("手法が指定されていません")
    for method in methods:
        check_method(method)
    targets = resolve_targets(checkpoint, instances, run_config["target"])
    cache = ProbabilityCache(checkpoint)
    attribution_cache = AttributionCache()

    curves = [
        degradation_curve(
            checkpoint, instances, targets, method, factory.build(method), run_config["fractions"],
            run_config["seed"], run_config["jobs"], run_config["removal"], cache, attribution_cache,
        )
        for method in methods
    ]
    normalized = normalize_curves(curves)
    drops = {curve.method: absolute_drop_at(curve) for curve in curves}
    return DegradationResult(curves, normalized, drops)


def degradation_summary(run_config: RunConfig, result: DegradationResult) -> Dict[str, Any]:
    """要約 JSON（手法ごとの {method, drop_at_11pct, layer, beta} と解決済み設定）"""
    entries = []
    for curve in result.curves:
        bottleneck = curve.method in BOTTLENECK_METHODS
        entries.append({
            "method": curve.method,
            "drop_at_11pct": result.drops[curve.method],
            "layer": run_config["layer"] if bottleneck else None,
            "beta": run_config["beta"] if bottleneck else None,
        })
    return {"methods": entries, "n": result.curves[0].n, **run_config.provenance()}


# ======================================================================
# sweep
# ======================================================================

def run_sweep(run_config: RunConfig, checkpoint: ModelCheckpoint, factory: MethodFactory,
              instances: Sequence[Instance], axis: str, values: Sequence[float]) -> SweepReport:
    """layer または beta 軸のスイープ"""
    targets = resolve_targets(checkpoint, instances, run_config["target"])
    config = run_config.bottleneck_config()
    common = dict(fractions=run_config["fractions"], seed=run_config["seed"], jobs=run_config["jobs"],
                  removal=run_config["removal"])
    if axis == "layer":
        layers = [int(v) for v in values]
        if any(v != int(v) for v in values):
            raise RangeError(f"layer は整数で指定してください: {list(values)}")
        return layer_sweep(checkpoint, instances, targets, layers, config, factory.noise_stats, **common)
    if axis == "beta":
        return beta_sweep(checkpoint, instances, targets, [float(v) for v in values], config,
                          factory.noise_stats(config.layer), **common)
    raise UsageError(f"スイープ軸は layer または beta です: {axis}")
