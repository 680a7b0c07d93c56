"""
情報ボトルネックによる寄与度推定 (IBA)

層 l の出力 X にインスタンスごとのボトルネックを挿入する:
    T = μ ⊙ X + (1 − μ) ⊙ ε,   μ = σ(α),   ε ~ N(mean, std²)
損失 L = CE(y | T) + β · Σ KL[P(T|X) ‖ Q(T)] を α について勾配降下で最小化し、
最終 α の KL をトークンごとに合計したものを寄与度とする。

座標ごとの KL（z = (x − mean) / std）:
    KL = −ln(1 − μ) + ((1 − μ)² + μ² z²) / 2 − 1/2
PAD 位置は μ ≡ 1・KL ≡ 0 として扱う。
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attribution import AttributionMap
from .error_handler import (
    ConfigError, InputError, InvalidValueError, OptimizationError, RangeError, ShapeError, get_logger,
)
from .model import Instance, ModelCheckpoint, forward_from, hidden_at, instance_tokens
from .tensor_core import (
    ComputeTape, Tensor, as_tensor, log, relu, sigmoid, take_along_last, tensor_mean, tensor_sum,
)


STD_FLOOR = 1e-6
MU_CEILING_GAP = 1e-12
DEFAULT_BETA = 1e-5
STATS_MODES = ("per-feature", "per-position")
BETA_MODES = ("fixed", "estimate")

logger = get_logger(__name__)


@dataclass(frozen=True)
class NoiseStats:
    """ノイズ分布 Q(T) の平均・標準偏差（per-feature: (d,)、per-position: (S, d)）"""
    mean: np.ndarray
    std: np.ndarray
    layer: int
    n_instances: int
    mode: str = "per-feature"
    seed: Optional[int] = None

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ShapeError("NoiseStats の平均と標準偏差の形状が一致しません", self.mean.shape, self.std.shape)
        if np.any(self.std < STD_FLOOR):
            raise InputError(f"std は {STD_FLOOR} 以上である必要があります")
        for array in (self.mean, self.std):
            array.setflags(write=False)


@dataclass(frozen=True)
class BottleneckConfig:
    """ボトルネック最適化の設定"""
    layer: int = 1
    beta: float = DEFAULT_BETA
    steps: int = 10
    lr: float = 1.0
    alpha_init: float = 5.0
    duplicates: int = 10
    seed: int = 0
    beta_mode: str = "fixed"

    def __post_init__(self):
        errors = []
        if not (isinstance(self.beta, (int, float)) and np.isfinite(self.beta) and self.beta > 0):
            errors.append(f"beta は正の有限値である必要があります: {self.beta}")
        if not isinstance(self.steps, int) or self.steps < 1:
            errors.append(f"steps は 1 以上である必要があります: {self.steps}")
        if not isinstance(self.duplicates, int) or self.duplicates < 1:
            errors.append(f"duplicates は 1 以上である必要があります: {self.duplicates}")
        if not (np.isfinite(self.lr) and self.lr > 0):
            errors.append(f"lr は正の有限値である必要があります: {self.lr}")
        if not np.isfinite(self.alpha_init):
            errors.append(f"alpha_init は有限値である必要があります: {self.alpha_init}")
        if self.beta_mode not in BETA_MODES:
            errors.append(f"beta_mode は {BETA_MODES} のいずれかです: {self.beta_mode}")
        if errors:
            raise ConfigError("; ".join(errors))


@dataclass
class BottleneckState:
    """最適化済みボトルネック"""
    alpha: np.ndarray
    hidden: np.ndarray
    mask: np.ndarray
    tokens: List[str]
    target: int
    beta: float
    stats: NoiseStats
    config: BottleneckConfig
    trace: List[Dict[str, float]] = field(default_factory=list)

    @property
    def mu(self) -> np.ndarray:
        return sigmoid(self.alpha).data

    @property
    def mean_mu(self) -> float:
        """実トークン位置の平均 μ"""
        return float(self.mu[self.mask].mean())


# ======================================================================
# ノイズ統計
# ======================================================================

def _column_stats(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # 並べ替えてから集計するので入力順に依存しない
    ordered = np.sort(values, axis=0)
    mean = ordered.mean(axis=0)
    std = np.sqrt(np.sort((ordered - mean) ** 2, axis=0).mean(axis=0))
    return mean, np.maximum(std, STD_FLOOR)


def noise_stats_from_hidden(hidden: np.ndarray, mask: np.ndarray, layer: int,
                            mode: str = "per-feature", seed: Optional[int] = None) -> NoiseStats:
    """
    隠れ表現 (N, S, d) から実トークン位置だけを使って統計を計算する（母標準偏差）
    """
    if mode not in STATS_MODES:
        raise ConfigError(f"stats_mode は {STATS_MODES} のいずれかです: {mode}")
    hidden = np.asarray(hidden, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if hidden.ndim != 3 or mask.shape != hidden.shape[:2]:
        raise ShapeError("隠れ表現とマスクの形状が一致しません", hidden.shape, mask.shape)

    keep = mask.any(axis=1)
    hidden, mask = hidden[keep], mask[keep]
    if hidden.shape[0] == 0:
        raise InputError("統計に使える実トークンがありません")

    pooled_mean, pooled_std = _column_stats(hidden[mask])
    if mode == "per-feature":
        return NoiseStats(pooled_mean, pooled_std, layer, int(hidden.shape[0]), mode, seed)

    seq_len, d_model = hidden.shape[1:]
    mean = np.tile(pooled_mean, (seq_len, 1))
    std = np.tile(pooled_std, (seq_len, 1))
    for position in range(seq_len):
        rows = mask[:, position]
        # 出現しない位置は全位置プールの値で埋める
        if rows.any():
            mean[position], std[position] = _column_stats(hidden[rows, position])
    return NoiseStats(mean, std, layer, int(hidden.shape[0]), mode, seed)


def estimate_noise_stats(checkpoint: ModelCheckpoint, calibration_set: Sequence[Instance], layer: int,
                         mode: str = "per-feature", batch_size: int = 64,
                         seed: Optional[int] = None) -> NoiseStats:
    """較正セットから層 l の出力の統計を推定する"""
    if not calibration_set:
        raise InputError("較正セットが空です")
    token_ids = np.stack([inst.token_ids for inst in calibration_set])
    mask = np.stack([inst.mask for inst in calibration_set])
    params = checkpoint.tensors()
    chunks = [
        hidden_at(checkpoint, token_ids[i:i + batch_size], mask[i:i + batch_size], layer, params).data
        for i in range(0, len(calibration_set), batch_size)
    ]
    stats = noise_stats_from_hidden(np.concatenate(chunks, axis=0), mask, layer, mode, seed)
    logger.info(f"ノイズ統計を推定しました: layer={layer}, instances={stats.n_instances}, mode={mode}")
    return stats


# ======================================================================
# ボトルネック
# ======================================================================

def _mask_grid(mask: Optional[np.ndarray], shape: Tuple[int, ...]) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape[:1]:
        raise ShapeError("マスク形状が隠れ表現と一致しません", mask.shape, shape)
    return np.broadcast_to(mask[:, None], shape).astype(np.float64)


def _check_stats_shape(stats: NoiseStats, shape: Tuple[int, ...]) -> None:
    if stats.mean.shape != shape[-stats.mean.ndim:]:
        raise ShapeError("ノイズ統計の形状が隠れ表現と一致しません", stats.mean.shape, shape)


def sample_noise(stats: NoiseStats, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """ε ~ N(mean, std²) を座標ごとに独立に生成"""
    _check_stats_shape(stats, shape)
    return rng.standard_normal(shape) * stats.std + stats.mean


def keep_ratio(alpha, mask: Optional[np.ndarray] = None) -> Tensor:
    """μ = σ(α)。PAD 位置は 1"""
    alpha = as_tensor(alpha)
    mu = sigmoid(alpha)
    grid = _mask_grid(mask, alpha.shape)
    if grid is None:
        return mu
    return mu * grid + (1.0 - grid)


def apply_bottleneck(hidden: np.ndarray, alpha, noise: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """固定したノイズで T = μ ⊙ X + (1 − μ) ⊙ ε を計算（noise は (S, d) か (D, S, d)）"""
    hidden = np.asarray(hidden, dtype=np.float64)
    alpha = as_tensor(alpha)
    if alpha.shape != hidden.shape or noise.shape[-2:] != hidden.shape:
        raise ShapeError("α・X・ε の形状が一致しません", alpha.shape, hidden.shape, noise.shape)
    mu = keep_ratio(alpha, mask)
    return mu * hidden + (1.0 - mu) * noise


def inject_noise(hidden: np.ndarray, alpha, stats: NoiseStats, rng: np.random.Generator,
                 mask: Optional[np.ndarray] = None, duplicates: Optional[int] = None) -> Tensor:
    """
    ノイズを注入したボトルネック出力 T

    Args:
        hidden: X (S, d)
        alpha: α (S, d)。Tensor ならテープに記録される
        duplicates: 指定時は独立なノイズで (D, S, d) を返す
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    shape = hidden.shape if duplicates is None else (duplicates,) + hidden.shape
    noise = sample_noise(stats, shape, rng)
    return apply_bottleneck(hidden, alpha, noise, mask)


def kl_term(alpha, hidden: np.ndarray, stats: NoiseStats, mask: Optional[np.ndarray] = None) -> Tensor:
    """座標ごとの KL[P(T|X) ‖ Q(T)] (S, d)。PAD 位置は 0"""
    alpha = as_tensor(alpha)
    hidden = np.asarray(hidden, dtype=np.float64)
    if alpha.shape != hidden.shape:
        raise ShapeError("α と X の形状が一致しません", alpha.shape, hidden.shape)
    _check_stats_shape(stats, hidden.shape)
    z_squared = ((hidden - stats.mean) / stats.std) ** 2

    # 1 − μ = σ(−α) を直接計算し、下限 MU_CEILING_GAP を保証する
    one_minus = sigmoid(-alpha) * (1.0 - MU_CEILING_GAP) + MU_CEILING_GAP
    mu = 1.0 - one_minus
    raw = (-log(one_minus) - mu) + (mu * mu) * (0.5 * (1.0 + z_squared))
    # 丸め誤差による負値を 0 に
    kl = relu(raw)
    grid = _mask_grid(mask, hidden.shape)
    return kl if grid is None else kl * grid


def iba_loss(class_probs, target: int, kl: Tensor, beta: float) -> Tuple[Tensor, Tensor, Tensor]:
    """
    L = CE + β · ΣKL

    Args:
        class_probs: (C,) または複製ごとの (D, C)。CE は複製の平均
        kl: kl_term の出力

    Returns:
        (total, ce, kl_sum)
    """
    class_probs = as_tensor(class_probs)
    n_classes = class_probs.shape[-1]
    if not isinstance(target, (int, np.integer)) or not 0 <= target < n_classes:
        raise InputError(f"target {target} がクラス数 {n_classes} の範囲外です")
    if not beta > 0:
        raise RangeError(f"beta は正である必要があります: {beta}")

    probs = class_probs if class_probs.ndim == 2 else class_probs.reshape(1, n_classes)
    picked = take_along_last(probs, np.full(probs.shape[0], int(target)))
    ce = -tensor_mean(log(picked))
    kl_sum = tensor_sum(kl)
    return ce + kl_sum * beta, ce, kl_sum


def estimate_beta(ce_at_init: float, kl_at_init: float, fallback: float = DEFAULT_BETA) -> float:
    """β ≈ 10 · CE / KL。定義できない場合は fallback"""
    if kl_at_init > 0 and np.isfinite(kl_at_init) and np.isfinite(ce_at_init):
        beta = 10.0 * ce_at_init / kl_at_init
        if beta > 0:
            return beta
    logger.warning(f"β を推定できません (ce={ce_at_init}, kl={kl_at_init})。既定値 {fallback} を使用します")
    return fallback


def bottleneck_loss(checkpoint: ModelCheckpoint, hidden: np.ndarray, mask: np.ndarray, alpha, noise: np.ndarray,
                    stats: NoiseStats, target: int, layer: int, beta: float) -> Tuple[Tensor, Tensor, Tensor]:
    """固定ノイズでの損失（α の関数として評価・勾配検証に使う）"""
    bottleneck = apply_bottleneck(hidden, alpha, noise, mask)
    probs = forward_from(checkpoint, bottleneck, mask, layer)
    return iba_loss(probs, target, kl_term(alpha, hidden, stats, mask), beta)


def fit_bottleneck(checkpoint: ModelCheckpoint, instance: Instance, target: int, config: BottleneckConfig,
                   stats: NoiseStats, rng: Optional[np.random.Generator] = None) -> BottleneckState:
    """
    1インスタンスのボトルネックを最適化する

    α を alpha_init で初期化し、各ステップで duplicates 個のノイズを引いて平均損失を計算し、
    学習率 lr の素の勾配降下で α を更新する。トレースは初期評価を含めて steps + 1 件。

    Raises:
        OptimizationError: 損失または勾配が非有限になった場合（トレース付き）
    """
    layer = config.layer
    if stats.layer != layer:
        raise InputError(f"ノイズ統計の層 {stats.layer} と設定の層 {layer} が一致しません")
    if not 0 <= target < checkpoint.config.n_classes:
        raise InputError(f"target {target} がクラス数 {checkpoint.config.n_classes} の範囲外です")
    rng = rng if rng is not None else np.random.default_rng(config.seed)

    hidden = hidden_at(checkpoint, instance.token_ids, instance.mask, layer).data[0]
    mask = instance.mask
    alpha_value = np.full(hidden.shape, float(config.alpha_init))
    beta = config.beta
    trace: List[Dict[str, float]] = []
    tape = ComputeTape("iba")

    for step in range(config.steps + 1):
        tape.reset()
        alpha = tape.variable(alpha_value)
        noise = sample_noise(stats, (config.duplicates,) + hidden.shape, rng)
        try:
            total, ce, kl_sum = bottleneck_loss(checkpoint, hidden, mask, alpha, noise, stats, target, layer, beta)
        except InvalidValueError as e:
            raise OptimizationError(f"ステップ {step} で非有限値: {e.message}", trace) from e

        if step == 0 and config.beta_mode == "estimate":
            beta = estimate_beta(ce.item(), kl_sum.item(), config.beta)
            total = ce + kl_sum * beta
            logger.debug(f"β を推定しました: {beta:.3e}")

        entry = {"step": step, "ce": ce.item(), "kl": kl_sum.item(), "total": total.item()}
        trace.append(entry)
        if not all(np.isfinite(v) for v in entry.values()):
            raise OptimizationError(f"ステップ {step} で損失が非有限になりました", trace)
        if step == config.steps:
            break

        tape.backward(total)
        grad = alpha.grad
        if not np.isfinite(grad).all():
            raise OptimizationError(f"ステップ {step} で勾配が非有限になりました", trace)
        alpha_value = alpha_value - config.lr * grad

    tape.reset()
    return BottleneckState(
        alpha=alpha_value,
        hidden=hidden,
        mask=mask.copy(),
        tokens=instance_tokens(instance, checkpoint.vocab),
        target=int(target),
        beta=float(beta),
        stats=stats,
        config=config,
        trace=trace,
    )


def token_scores(alpha: np.ndarray, hidden: np.ndarray, stats: NoiseStats, mask: np.ndarray) -> np.ndarray:
    """実トークンごとの KL 合計（PAD を除く）"""
    kl = kl_term(alpha, hidden, stats, mask).data
    return kl.sum(axis=1)[:int(np.asarray(mask, dtype=bool).sum())]


def attribution_from_state(state: BottleneckState, hidden: Optional[np.ndarray] = None,
                           stats: Optional[NoiseStats] = None, method: str = "iba") -> AttributionMap:
    """最終 α の KL を特徴軸で合計したトークン寄与度（CLS は先頭に含む）"""
    hidden = state.hidden if hidden is None else hidden
    stats = state.stats if stats is None else stats
    return AttributionMap(
        method=method,
        tokens=list(state.tokens),
        scores=token_scores(state.alpha, hidden, stats, state.mask),
        target=state.target,
        seed=state.config.seed,
        layer=state.config.layer,
        beta=state.beta,
    )


def iba_attribution(checkpoint: ModelCheckpoint, instance: Instance, target: int, config: BottleneckConfig,
                    stats: NoiseStats, rng: Optional[np.random.Generator] = None) -> AttributionMap:
    """fit_bottleneck + attribution_from_state"""
    return attribution_from_state(fit_bottleneck(checkpoint, instance, target, config, stats, rng))


def x_only_attribution(checkpoint: ModelCheckpoint, instance: Instance, target: int, config: BottleneckConfig,
                       stats: NoiseStats) -> AttributionMap:
    """最適化なし（α = alpha_init）のボトルネックから読み出した寄与度"""
    hidden = hidden_at(checkpoint, instance.token_ids, instance.mask, config.layer).data[0]
    alpha = np.full(hidden.shape, float(config.alpha_init))
    return AttributionMap(
        method="x-only",
        tokens=instance_tokens(instance, checkpoint.vocab),
        scores=token_scores(alpha, hidden, stats, instance.mask),
        target=int(target),
        seed=config.seed,
        layer=config.layer,
        beta=config.beta,
    )
