"""
劣化テストと正規化、層 / β スイープ

手順:
    1. インスタンスごとに寄与度を一度だけ計算する
    2. 寄与度の高い順に上位 k トークンを取り除く（k = round(f · n)、n は CLS 以外の実トークン数）
    3. 元のチェックポイントでターゲットクラス確率を評価し、インスタンス平均をとる
正規化: d = (p − m) / (o − m)、m は全手法の割合 1 での値の最小値、o は割合 0 での値。
"""
import io
import csv
import math
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attribution import AttributeFn, AttributionMap, attribute_dataset
from .checkpoint import checkpoint_fingerprint
from .error_handler import (
    ContaminationError, ContractError, InputError, NormalizationError, RangeError, get_logger,
)
from .iba import BottleneckConfig, BottleneckState, NoiseStats, attribution_from_state, fit_bottleneck
from .model import PAD, UNK, Instance, ModelCheckpoint, predict_proba


HEADLINE_FRACTION = 0.11
REMOVAL_MODES = ("delete", "unk")
CURVE_HEADER = ("method", "fraction", "p_mean", "d_norm", "n")
SWEEP_HEADER = ("axis", "value", "drop_at_11pct", "mean_mu_final")

logger = get_logger(__name__)


def default_fractions() -> List[float]:
    """0, 0.02, 0.04, 0.05, 0.06, 0.08, 0.10, 0.11, 0.15, 0.20, 0.30, ..., 1.00"""
    grid = [i / 50 for i in range(6)] + [0.05, 0.11, 0.15] + [i / 10 for i in range(2, 11)]
    return sorted(round(f, 10) for f in grid)


def check_fractions(fractions: Sequence[float]) -> np.ndarray:
    grid = np.asarray(fractions, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2:
        raise InputError("割合グリッドには 2 点以上が必要です")
    if grid[0] != 0.0 or grid[-1] != 1.0:
        raise InputError("割合グリッドは 0 で始まり 1 で終わる必要があります")
    if np.any(np.diff(grid) <= 0):
        raise InputError("割合グリッドは狭義単調増加である必要があります")
    return grid


@dataclass
class DegradationCurve:
    """手法ごとの平均ターゲット確率"""
    method: str
    fractions: np.ndarray
    p_mean: np.ndarray
    n: int

    @property
    def original(self) -> float:
        return float(self.p_mean[0])


@dataclass
class NormalizedCurve:
    method: str
    fractions: np.ndarray
    d_norm: np.ndarray


# ======================================================================
# トークン削除
# ======================================================================

def removal_count(fraction: float, n_tokens: int) -> int:
    """k = floor(f · n + 0.5)（n を超えない）"""
    return min(n_tokens, int(math.floor(fraction * n_tokens + 0.5)))


def removal_order(attribution: AttributionMap, instance: Instance) -> np.ndarray:
    """CLS 以外の実トークン位置を寄与度の降順に（同点は前の位置が先）"""
    n_real = instance.n_real
    if len(attribution.scores) != n_real:
        raise InputError(f"寄与度のトークン数 {len(attribution.scores)} が実トークン数 {n_real} と一致しません")
    scores = attribution.scores[1:n_real]
    return np.argsort(-scores, kind="stable") + 1


def degrade_instance(instance: Instance, attribution: AttributionMap, k: int, mode: str = "delete",
                     order: Optional[np.ndarray] = None) -> Instance:
    """
    上位 k トークンを取り除いたインスタンス

    mode="delete" は削除して左詰め・再パディング、mode="unk" は UNK に置換する。CLS は削除しない。
    """
    if mode not in REMOVAL_MODES:
        raise InputError(f"removal は {REMOVAL_MODES} のいずれかです: {mode}")
    order = removal_order(attribution, instance) if order is None else order
    if not 0 <= k <= len(order):
        raise RangeError(f"k={k} は 0..{len(order)} の範囲で指定してください")
    if k == 0:
        return instance.with_tokens(instance.token_ids.copy(), instance.mask.copy())

    removed = order[:k]
    token_ids = instance.token_ids.copy()
    mask = instance.mask.copy()
    if mode == "unk":
        token_ids[removed] = UNK
        return instance.with_tokens(token_ids, mask)

    keep = np.ones(instance.n_real, dtype=bool)
    keep[removed] = False
    kept_ids = instance.token_ids[:instance.n_real][keep]
    token_ids = np.full(instance.seq_len, PAD, dtype=np.int64)
    token_ids[:len(kept_ids)] = kept_ids
    mask = np.zeros(instance.seq_len, dtype=bool)
    mask[:len(kept_ids)] = True
    return instance.with_tokens(token_ids, mask)


# ======================================================================
# キャッシュ
# ======================================================================

class ProbabilityCache:
    """
    トークン列 -> クラス確率（1件ずつ評価するので手法間で同じ入力は同じ値になる）

    最大 max_entries 件を保持し、超えた分は最も古く参照されたものから捨てる。
    """

    def __init__(self, checkpoint: ModelCheckpoint, max_entries: int = 4096):
        if max_entries < 1:
            raise InputError(f"max_entries は 1 以上である必要があります: {max_entries}")
        self.checkpoint = checkpoint
        self.max_entries = max_entries
        self._values: "OrderedDict[Tuple[bytes, bytes], np.ndarray]" = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def probabilities(self, instance: Instance) -> np.ndarray:
        key = (instance.token_ids.tobytes(), instance.mask.tobytes())
        with self._lock:
            cached = self._values.get(key)
            if cached is not None:
                self._values.move_to_end(key)
                self.hits += 1
                return cached
        value = predict_proba(self.checkpoint, instance.token_ids[None, :], instance.mask[None, :])[0]
        value.setflags(write=False)
        with self._lock:
            self.misses += 1
            value = self._values.setdefault(key, value)
            self._values.move_to_end(key)
            while len(self._values) > self.max_entries:
                self._values.popitem(last=False)
            return value

    def __len__(self) -> int:
        return len(self._values)


class AttributionCache:
    """(インスタンス番号, 手法) ごとに一度だけ書き込める寄与度キャッシュ"""

    def __init__(self):
        self._maps: Dict[Tuple[int, str], AttributionMap] = {}
        self._lock = threading.Lock()

    def put(self, index: int, method: str, attribution: AttributionMap) -> None:
        with self._lock:
            if (index, method) in self._maps:
                raise ContractError(f"寄与度は既に記録されています: index={index}, method={method}")
            self._maps[(index, method)] = attribution

    def get(self, index: int, method: str) -> Optional[AttributionMap]:
        with self._lock:
            return self._maps.get((index, method))

    def __contains__(self, key: Tuple[int, str]) -> bool:
        with self._lock:
            return key in self._maps


# ======================================================================
# 劣化曲線
# ======================================================================

def curve_from_attributions(checkpoint: ModelCheckpoint, instances: Sequence[Instance], targets: Sequence[int],
                            attributions: Sequence[AttributionMap], fractions: Sequence[float],
                            removal: str = "delete", cache: Optional[ProbabilityCache] = None,
                            method: Optional[str] = None) -> DegradationCurve:
    """計算済みの寄与度から劣化曲線を作る"""
    if not instances:
        raise InputError("評価データが空です")
    if not (len(instances) == len(targets) == len(attributions)):
        raise InputError("インスタンス・ターゲット・寄与度の件数が一致しません")
    grid = check_fractions(fractions)
    if cache is None:
        cache = ProbabilityCache(checkpoint)

    probs = np.zeros((len(grid), len(instances)))
    for j, (instance, target, attribution) in enumerate(zip(instances, targets, attributions)):
        order = removal_order(attribution, instance)
        for i, fraction in enumerate(grid):
            degraded = degrade_instance(instance, attribution, removal_count(fraction, len(order)), removal, order)
            probs[i, j] = cache.probabilities(degraded)[target]

    return DegradationCurve(
        method=method or attributions[0].method,
        fractions=grid,
        p_mean=probs.mean(axis=1),
        n=len(instances),
    )


def degradation_curve(checkpoint: ModelCheckpoint, instances: Sequence[Instance], targets: Sequence[int],
                      method: str, attribute_one: AttributeFn, fractions: Sequence[float], seed: int,
                      jobs: int = 1, removal: str = "delete", cache: Optional[ProbabilityCache] = None,
                      attribution_cache: Optional[AttributionCache] = None) -> DegradationCurve:
    """
    手法の寄与度を計算して劣化曲線を作る

    寄与度計算の前後でチェックポイントの指紋を比較し、変化していれば ContaminationError。
    """
    if not instances:
        raise InputError("評価データが空です")
    fingerprint = checkpoint_fingerprint(checkpoint)
    if attribution_cache is None:
        attribution_cache = AttributionCache()

    def compute(index: int, instance: Instance, target: int, rng: np.random.Generator) -> AttributionMap:
        cached = attribution_cache.get(index, method)
        if cached is not None:
            return cached
        attribution = attribute_one(index, instance, target, rng)
        attribution_cache.put(index, method, attribution)
        return attribution

    attributions = attribute_dataset(instances, targets, compute, seed, jobs)
    if checkpoint_fingerprint(checkpoint) != fingerprint:
        raise ContaminationError(f"{method} の寄与度計算中にチェックポイントが変更されました")

    curve = curve_from_attributions(checkpoint, instances, targets, attributions, fractions, removal, cache, method)
    logger.info(f"劣化曲線: method={method}, o={curve.original:.4f}, end={curve.p_mean[-1]:.4f}")
    return curve


def normalize_curves(curves: Sequence[DegradationCurve]) -> List[NormalizedCurve]:
    """d = (p − m) / (o − m)"""
    if not curves:
        raise InputError("正規化する曲線がありません")
    grid = curves[0].fractions
    for curve in curves[1:]:
        if not np.array_equal(curve.fractions, grid):
            raise InputError(f"{curve.method} の割合グリッドが他の曲線と一致しません")
    m = min(float(curve.p_mean[-1]) for curve in curves)

    normalized = []
    for curve in curves:
        o = curve.original
        if not o > m:
            raise NormalizationError(f"{curve.method}: o={o} が m={m} より大きくないため正規化できません")
        normalized.append(NormalizedCurve(curve.method, curve.fractions, (curve.p_mean - m) / (o - m)))
    return normalized


def absolute_drop_at(curve: DegradationCurve, fraction: float = HEADLINE_FRACTION) -> float:
    """o − p(fraction)。グリッド上になければ線形補間"""
    grid = curve.fractions
    if not grid[0] <= fraction <= grid[-1]:
        raise RangeError(f"fraction={fraction} がグリッド範囲 [{grid[0]}, {grid[-1]}] の外です")
    exact = np.flatnonzero(grid == fraction)
    value = curve.p_mean[exact[0]] if exact.size else np.interp(fraction, grid, curve.p_mean)
    return float(curve.original - value)


def curves_to_csv(curves: Sequence[DegradationCurve], normalized: Sequence[NormalizedCurve],
                  prefix: Optional[Sequence[Tuple[str, Any]]] = None) -> str:
    """曲線 CSV（method,fraction,p_mean,d_norm,n）"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    prefix_names = [name for name, _ in prefix] if prefix else []
    writer.writerow(prefix_names + list(CURVE_HEADER))
    for curve, norm in zip(curves, normalized):
        for fraction, p, d in zip(curve.fractions, curve.p_mean, norm.d_norm):
            prefix_values = [value for _, value in prefix] if prefix else []
            writer.writerow(prefix_values + [curve.method, repr(float(fraction)), repr(float(p)),
                                             repr(float(d)), curve.n])
    return buffer.getvalue()


# ======================================================================
# スイープ
# ======================================================================

@dataclass
class SweepPoint:
    value: float
    drop_at_11pct: float
    mean_mu_final: float
    curve: DegradationCurve


@dataclass
class SweepReport:
    """軸（layer / beta）ごとの要約指標"""
    axis: str
    points: List[SweepPoint]
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        values = [p.value for p in self.points]
        if values != sorted(values) or len(set(values)) != len(values):
            raise InputError(f"スイープ軸の値は昇順かつ一意である必要があります: {values}")

    @property
    def values(self) -> List[float]:
        return [p.value for p in self.points]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for point in self.points:
            value = int(point.value) if self.axis == "layer" else repr(float(point.value))
            writer.writerow([self.axis, value, repr(point.drop_at_11pct), repr(point.mean_mu_final)])
        return buffer.getvalue()

    def curves_csv(self) -> str:
        """各スイープ点の劣化曲線（スイープ点全体で正規化）"""
        curves = [p.curve for p in self.points]
        normalized = normalize_curves(curves)
        chunks = []
        for i, (point, curve, norm) in enumerate(zip(self.points, curves, normalized)):
            value = int(point.value) if self.axis == "layer" else repr(float(point.value))
            text = curves_to_csv([curve], [norm], prefix=[("axis", self.axis), ("value", value)])
            chunks.append(text if i == 0 else text.split("\n", 1)[1])
        return "".join(chunks)


StatsProvider = Callable[[int], NoiseStats]


def run_iba_point(checkpoint: ModelCheckpoint, instances: Sequence[Instance], targets: Sequence[int],
                  config: BottleneckConfig, stats: NoiseStats, fractions: Sequence[float], seed: int,
                  jobs: int = 1, removal: str = "delete",
                  cache: Optional[ProbabilityCache] = None) -> SweepPoint:
    """1設定で IBA を全インスタンスに適用し、劣化曲線と平均 μ をまとめる"""
    fingerprint = checkpoint_fingerprint(checkpoint)

    def fit(index: int, instance: Instance, target: int, rng: np.random.Generator) -> BottleneckState:
        return fit_bottleneck(checkpoint, instance, target, config, stats, rng)

    states = attribute_dataset(instances, targets, fit, seed, jobs)
    if checkpoint_fingerprint(checkpoint) != fingerprint:
        raise ContaminationError("IBA の最適化中にチェックポイントが変更されました")
    attributions = [attribution_from_state(state) for state in states]
    curve = curve_from_attributions(checkpoint, instances, targets, attributions, fractions, removal, cache, "iba")
    return SweepPoint(
        value=0.0,
        drop_at_11pct=absolute_drop_at(curve),
        mean_mu_final=float(np.mean([state.mean_mu for state in states])),
        curve=curve,
    )


def layer_sweep(checkpoint: ModelCheckpoint, instances: Sequence[Instance], targets: Sequence[int],
                layers: Sequence[int], config: BottleneckConfig, stats_for_layer: StatsProvider,
                fractions: Sequence[float], seed: int, jobs: int = 1, removal: str = "delete") -> SweepReport:
    """層ごとに新しいノイズ統計で IBA を実行する"""
    if len(set(layers)) != len(layers):
        raise InputError(f"層の値が重複しています: {list(layers)}")
    n_layers = checkpoint.config.n_layers
    for layer in layers:
        if not 0 <= int(layer) <= n_layers:
            raise RangeError(f"layer は 0..{n_layers} の範囲で指定してください: {layer}")

    cache = ProbabilityCache(checkpoint)
    points = []
    for layer in sorted(int(v) for v in layers):
        point_config = replace(config, layer=layer)
        point = run_iba_point(checkpoint, instances, targets, point_config, stats_for_layer(layer),
                              fractions, seed, jobs, removal, cache)
        point.value = layer
        logger.info(f"layer sweep: layer={layer}, drop@11%={point.drop_at_11pct:.4f}")
        points.append(point)
    return SweepReport(axis="layer", points=points, config={**asdict(config), "layers": sorted(int(v) for v in layers)})


def beta_sweep(checkpoint: ModelCheckpoint, instances: Sequence[Instance], targets: Sequence[int],
               betas: Sequence[float], config: BottleneckConfig, stats: NoiseStats,
               fractions: Sequence[float], seed: int, jobs: int = 1, removal: str = "delete") -> SweepReport:
    """β ごとに IBA を実行し、平均最終 μ も記録する"""
    if len(set(betas)) != len(betas):
        raise InputError(f"β の値が重複しています: {list(betas)}")
    for beta in betas:
        if not beta > 0:
            raise RangeError(f"β は正である必要があります: {beta}")

    cache = ProbabilityCache(checkpoint)
    points = []
    for beta in sorted(float(v) for v in betas):
        point_config = replace(config, beta=beta)
        point = run_iba_point(checkpoint, instances, targets, point_config, stats, fractions, seed, jobs,
                              removal, cache)
        point.value = beta
        logger.info(f"beta sweep: beta={beta:.1e}, drop@11%={point.drop_at_11pct:.4f}, "
                    f"mean_mu={point.mean_mu_final:.4f}")
        points.append(point)
    return SweepReport(axis="beta", points=points, config={**asdict(config), "betas": sorted(float(v) for v in betas)})
