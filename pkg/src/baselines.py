"""
比較用の寄与度手法: Integrated Gradients, LIME-lite, ランダム
"""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from sklearn.linear_model import Ridge

from .attribution import AttributionMap
from .error_handler import ConfigError, InputError, NumericError, get_logger
from .model import (
    UNK, Instance, ModelCheckpoint, embed_tokens, hidden_from_embeddings, instance_tokens, logits_from,
    predict_proba, Vocab,
)
from .tensor_core import ComputeTape, Tensor, log_softmax, take_along_last, tensor_sum


IG_BASELINES = ("zero", "unk")

logger = get_logger(__name__)


@dataclass(frozen=True)
class IGConfig:
    """Integrated Gradients の設定"""
    steps: int = 10
    baseline: str = "zero"
    batch_size: int = 32

    def __post_init__(self):
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError(f"ig_steps は 1 以上である必要があります: {self.steps}")
        if self.baseline not in IG_BASELINES:
            raise ConfigError(f"ig_baseline は {IG_BASELINES} のいずれかです: {self.baseline}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size は 1 以上である必要があります: {self.batch_size}")


@dataclass(frozen=True)
class SurrogateConfig:
    """LIME-lite の設定"""
    n_samples: int = 100
    mask_prob: float = 0.3
    ridge: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        errors = []
        if not isinstance(self.n_samples, int) or self.n_samples < 2:
            errors.append(f"lime_samples は 2 以上である必要があります: {self.n_samples}")
        if not 0 < self.mask_prob < 1:
            errors.append(f"mask_prob は (0, 1) の範囲です: {self.mask_prob}")
        if not self.ridge > 0:
            errors.append(f"ridge は正である必要があります: {self.ridge}")
        if errors:
            raise ConfigError("; ".join(errors))


# ======================================================================
# Integrated Gradients
# ======================================================================

PathFn = Callable[[Tensor], Tensor]


def path_integral(fn: PathFn, inputs: np.ndarray, baseline: np.ndarray, steps: int,
                  batch_size: int = 32) -> np.ndarray:
    """
    baseline から inputs への直線経路上の勾配を中点則で積分し、(inputs − baseline) ⊙ 平均勾配 を返す

    Args:
        fn: (B, *inputs.shape) の点列 -> (B,) のスカラー出力
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if inputs.shape != baseline.shape:
        raise InputError(f"入力とベースラインの形状が一致しません: {inputs.shape} vs {baseline.shape}")
    delta = inputs - baseline
    fractions = (np.arange(steps) + 0.5) / steps
    total_grad = np.zeros_like(inputs)
    tape = ComputeTape("integrated_gradients")
    expand = (slice(None),) + (None,) * inputs.ndim

    for start in range(0, steps, batch_size):
        chunk = fractions[start:start + batch_size]
        tape.reset()
        points = tape.variable(baseline + chunk[expand] * delta)
        outputs = fn(points)
        if outputs.shape != (len(chunk),):
            raise InputError(f"経路関数の出力形状が不正です: {outputs.shape}")
        tape.backward(tensor_sum(outputs))
        total_grad += points.grad.sum(axis=0)
    tape.reset()
    return delta * (total_grad / steps)


def target_log_prob(checkpoint: ModelCheckpoint, embeddings, mask: np.ndarray, target: int,
                    params=None) -> Tensor:
    """トークン埋め込み (B, S, d) からターゲットクラスの対数確率 (B,)"""
    params = params or checkpoint.tensors()
    embeddings = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    hidden = hidden_from_embeddings(checkpoint, embeddings, params)
    logits = logits_from(checkpoint, hidden, mask, 0, params)
    return take_along_last(log_softmax(logits), np.full(embeddings.shape[0], int(target)))


def ig_baseline(checkpoint: ModelCheckpoint, instance: Instance, config: IGConfig) -> np.ndarray:
    """実トークン（CLS を含む）の埋め込みを置き換えたベースライン。PAD 位置は入力のまま"""
    embeddings = embed_tokens(checkpoint, instance.token_ids).data[0]
    baseline = embeddings.copy()
    if config.baseline == "zero":
        baseline[instance.mask] = 0.0
    else:
        baseline[instance.mask] = checkpoint.params["token_embedding"][UNK]
    return baseline


def integrated_gradients(checkpoint: ModelCheckpoint, instance: Instance, target: int,
                         config: Optional[IGConfig] = None, seed: int = 0) -> AttributionMap:
    """埋め込み上の Integrated Gradients（ターゲットの対数確率）"""
    config = config or IGConfig()
    if not 0 <= target < checkpoint.config.n_classes:
        raise InputError(f"target {target} がクラス数 {checkpoint.config.n_classes} の範囲外です")
    params = checkpoint.tensors()
    embeddings = embed_tokens(checkpoint, instance.token_ids, params).data[0]
    baseline = ig_baseline(checkpoint, instance, config)
    mask = instance.mask[None, :]

    contributions = path_integral(
        lambda points: target_log_prob(checkpoint, points, mask, target, params),
        embeddings, baseline, config.steps, config.batch_size,
    )
    return AttributionMap(
        method="ig",
        tokens=instance_tokens(instance, checkpoint.vocab),
        scores=contributions.sum(axis=1)[:instance.n_real],
        target=int(target),
        seed=int(seed),
    )


# ======================================================================
# LIME-lite
# ======================================================================

ProbabilityFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def surrogate_coefficients(instance: Instance, predict_fn: ProbabilityFn, config: SurrogateConfig,
                           rng: np.random.Generator) -> np.ndarray:
    """
    CLS 以外の実トークンをランダムに UNK へ置換し、保持マスク -> 確率 のリッジ回帰係数を返す

    Args:
        predict_fn: (token_ids (N, S), mask (N, S)) -> ターゲット確率 (N,)
    """
    n_tokens = instance.n_real - 1
    if n_tokens <= 0:
        return np.zeros(0)
    if config.n_samples < n_tokens + 1:
        raise InputError(f"lime_samples ({config.n_samples}) はトークン数 + 1 ({n_tokens + 1}) 以上が必要です")

    kept = rng.random((config.n_samples, n_tokens)) >= config.mask_prob
    token_ids = np.tile(instance.token_ids, (config.n_samples, 1))
    token_ids[:, 1:n_tokens + 1] = np.where(kept, token_ids[:, 1:n_tokens + 1], UNK)
    masks = np.tile(instance.mask, (config.n_samples, 1))
    probs = np.asarray(predict_fn(token_ids, masks), dtype=np.float64)

    surrogate = Ridge(alpha=config.ridge, fit_intercept=True)
    surrogate.fit(kept.astype(np.float64), probs)
    coefficients = np.asarray(surrogate.coef_, dtype=np.float64)
    if not np.isfinite(coefficients).all():
        raise NumericError("LIME-lite の回帰係数が非有限です")
    return coefficients


def lime_lite(checkpoint: ModelCheckpoint, instance: Instance, target: int,
              config: Optional[SurrogateConfig] = None, rng: Optional[np.random.Generator] = None) -> AttributionMap:
    """線形サロゲートの係数を寄与度とする（CLS のスコアは 0）"""
    config = config or SurrogateConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)

    def predict(token_ids: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return predict_proba(checkpoint, token_ids, masks)[:, target]

    coefficients = surrogate_coefficients(instance, predict, config, rng)
    return AttributionMap(
        method="lime-lite",
        tokens=instance_tokens(instance, checkpoint.vocab),
        scores=np.concatenate([[0.0], coefficients]),
        target=int(target),
        seed=config.seed,
    )


# ======================================================================
# ランダム
# ======================================================================

def random_attribution(instance: Instance, vocab: Vocab, seed: int, rng: Optional[np.random.Generator] = None,
                       target: Optional[int] = None) -> AttributionMap:
    """実トークンに [0, 1) の一様乱数を割り当てる（トークン文字列は vocab から）"""
    rng = rng if rng is not None else np.random.default_rng(seed)
    tokens = instance_tokens(instance, vocab)
    if target is None:
        target = instance.label if instance.label is not None else 0
    return AttributionMap(
        method="random",
        tokens=tokens,
        scores=rng.random(instance.n_real),
        target=int(target),
        seed=int(seed),
    )
