"""
モデルの学習（モーメンタム付き SGD によるクロスエントロピー最小化。勾配は全体ノルムでクリップする）
"""
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import Example
from .error_handler import ConfigError, InputError, get_logger
from .model import (
    Instance, ModelCheckpoint, ModelConfig, build_vocab, hidden_at, init_parameters, logits_from,
    predict_proba, tokenize, Vocab,
)
from .tensor_core import ComputeTape, log_softmax, take_along_last, tensor_mean


logger = get_logger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """学習設定"""
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        errors = []
        if not isinstance(self.epochs, int) or self.epochs < 0:
            errors.append(f"epochs は 0 以上である必要があります: {self.epochs}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            errors.append(f"batch_size は 1 以上である必要があります: {self.batch_size}")
        if not self.lr > 0:
            errors.append(f"train_lr は正である必要があります: {self.lr}")
        if not 0 <= self.momentum < 1:
            errors.append(f"momentum は [0, 1) の範囲です: {self.momentum}")
        if not self.clip_norm > 0:
            errors.append(f"clip_norm は正である必要があります: {self.clip_norm}")
        if errors:
            raise ConfigError("; ".join(errors))


def to_instances(examples: Sequence[Example], vocab: Vocab, max_seq_len: int) -> List[Instance]:
    return [tokenize(ex.text, vocab, max_seq_len, label=ex.label) for ex in examples]


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """
    全パラメータをまとめた L2 ノルムが max_norm を超える場合に一様に縮小する

    Returns:
        (縮小後の勾配, 縮小前のノルム)
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def _stack(instances: Sequence[Instance]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    token_ids = np.stack([inst.token_ids for inst in instances])
    mask = np.stack([inst.mask for inst in instances])
    labels = np.array([inst.label for inst in instances], dtype=np.int64)
    return token_ids, mask, labels


def _mean_loss(checkpoint: ModelCheckpoint, token_ids, mask, labels, batch_size: int = 64) -> float:
    probs = predict_proba(checkpoint, token_ids, mask, batch_size)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, np.finfo(np.float64).tiny)).mean())


def accuracy(checkpoint: ModelCheckpoint, instances: Sequence[Instance]) -> float:
    """正解率"""
    if not instances:
        return float("nan")
    token_ids, mask, labels = _stack(instances)
    predictions = predict_proba(checkpoint, token_ids, mask).argmax(axis=1)
    return float((predictions == labels).mean())


def train(examples: Sequence[Example], model_config: ModelConfig, train_config: TrainConfig,
          validation: Optional[Sequence[Example]] = None) -> ModelCheckpoint:
    """
    学習してチェックポイントを返す

    語彙は学習データから構築する。エポックごとに学習データ全体の損失と検証正解率を記録する。
    同じシードなら結果はビット単位で一致する。

    Raises:
        InputError: データが空、ラベルが範囲外、またはクラスが1種類しかない場合
    """
    if not examples:
        raise InputError("学習データが空です")
    labels = sorted({ex.label for ex in examples})
    if len(labels) < 2:
        raise InputError(f"学習データには2クラス以上が必要です: labels={labels}")
    if labels[-1] >= model_config.n_classes:
        raise InputError(f"ラベル {labels[-1]} が n_classes={model_config.n_classes} の範囲外です")

    vocab = build_vocab((ex.text for ex in examples), model_config.vocab_size)
    train_instances = to_instances(examples, vocab, model_config.max_seq_len)
    validation_instances = to_instances(validation or [], vocab, model_config.max_seq_len)
    token_ids, mask, targets = _stack(train_instances)

    params = init_parameters(model_config, train_config.seed)
    velocity = {name: np.zeros_like(value) for name, value in params.items()}
    shuffle_rng = np.random.default_rng([train_config.seed, 1])
    loss_history: List[float] = []
    validation_history: List[float] = []
    tape = ComputeTape("train")

    def snapshot(metadata: Dict) -> ModelCheckpoint:
        return ModelCheckpoint(config=model_config, vocab=vocab, params=params, training=metadata)

    for epoch in range(train_config.epochs):
        order = shuffle_rng.permutation(len(train_instances))
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            tape.reset()
            leaves = {name: tape.variable(value) for name, value in params.items()}
            current = snapshot({})
            hidden = hidden_at(current, token_ids[batch], mask[batch], 0, leaves)
            logits = logits_from(current, hidden, mask[batch], 0, leaves)
            loss = -tensor_mean(take_along_last(log_softmax(logits), targets[batch]))
            tape.backward(loss)
            grads, _ = clip_gradients({name: leaf.grad for name, leaf in leaves.items()}, train_config.clip_norm)
            for name, grad in grads.items():
                velocity[name] = train_config.momentum * velocity[name] + grad
                params[name] = params[name] - train_config.lr * velocity[name]

        current = snapshot({})
        loss_history.append(_mean_loss(current, token_ids, mask, targets))
        validation_history.append(accuracy(current, validation_instances) if validation_instances else None)
        logger.info(
            f"epoch {epoch + 1}/{train_config.epochs}: loss={loss_history[-1]:.4f}"
            + (f", val_acc={validation_history[-1]:.4f}" if validation_instances else "")
        )
    tape.reset()

    final = snapshot({})
    metadata = {
        **asdict(train_config),
        "n_train": len(train_instances),
        "n_validation": len(validation_instances),
        "train_accuracy": accuracy(final, train_instances),
        "validation_accuracy": accuracy(final, validation_instances) if validation_instances else None,
        "loss_history": loss_history,
        "validation_accuracy_history": validation_history,
    }
    return snapshot(metadata)
