"""
小規模 Transformer エンコーダ分類器

語彙構築・トークン化・パラメータ定義と、任意の層 l で分割できる順伝播を提供する。
層の番号付け:
    l = 0        埋め込み + 位置埋め込み + 正規化の直後（第1層の入力）
    l = 1..L     第 l エンコーダブロックの最後の残差 + 正規化の直後
    l = L        分類ヘッドへの入力
forward は forward_from(forward_lower(x, L), L) として実装し、分割前後で演算順序が同一になる。
"""
import re
from collections import Counter
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .error_handler import ConfigError, InputError, RangeError, ShapeError, InvalidValueError
from .tensor_core import (
    Tensor, gather_rows, gelu, layer_norm, matmul, reshape, softmax, take, transpose,
)


PAD, UNK, CLS = 0, 1, 2
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]")
_WORD_PATTERN = re.compile(r"\w+")


@dataclass(frozen=True)
class ModelConfig:
    """モデル構成"""
    vocab_size: int
    n_classes: int = 2
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 64

    def __post_init__(self):
        errors = []
        for name in ("vocab_size", "n_classes", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                errors.append(f"{name} は 1 以上の整数である必要があります: {value!r}")
        if not errors and self.d_model % self.n_heads != 0:
            errors.append(f"d_model ({self.d_model}) は n_heads ({self.n_heads}) で割り切れる必要があります")
        if not errors and self.vocab_size < len(RESERVED_TOKENS):
            errors.append(f"vocab_size は {len(RESERVED_TOKENS)} 以上である必要があります")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass
class Vocab:
    """語彙（id -> トークン）。PAD=0, UNK=1, CLS=2 は固定"""
    tokens: List[str]
    index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise InputError("語彙の先頭は [PAD], [UNK], [CLS] である必要があります")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise InputError("語彙に重複したトークンがあります")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]


@dataclass(eq=False)
class Instance:
    """トークン化済みインスタンス（CLS 先頭、PAD で max_seq_len まで詰める）"""
    token_ids: np.ndarray
    mask: np.ndarray
    label: Optional[int] = None
    text: Optional[str] = None

    @property
    def n_real(self) -> int:
        """CLS を含む実トークン数"""
        return int(self.mask.sum())

    @property
    def seq_len(self) -> int:
        return int(self.token_ids.shape[0])

    def with_tokens(self, token_ids: np.ndarray, mask: np.ndarray) -> "Instance":
        return Instance(token_ids=token_ids, mask=mask, label=self.label, text=self.text)


def split_words(text: str) -> List[str]:
    """小文字化し、空白・句読点で分割"""
    return _WORD_PATTERN.findall(text.lower())


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """
    頻度順に語彙を構築する（同頻度は辞書順）

    Args:
        corpus: テキストの列
        max_size: 予約トークンを含む語彙サイズ上限
    """
    texts = list(corpus)
    if not texts:
        raise InputError("コーパスが空です")
    if max_size < len(RESERVED_TOKENS):
        raise InputError(f"max_size は {len(RESERVED_TOKENS)} 以上である必要があります: {max_size}")

    counts = Counter()
    for text in texts:
        counts.update(split_words(text))
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    kept = [tok for tok, _ in ranked[:max_size - len(RESERVED_TOKENS)]]
    return Vocab(list(RESERVED_TOKENS) + kept)


def tokenize(text: str, vocab: Vocab, max_seq_len: int, label: Optional[int] = None) -> Instance:
    """[CLS] + トークン id（未知語は UNK）を max_seq_len に切り詰め / パディング"""
    ids = [CLS] + [vocab.id_of(w) for w in split_words(text)]
    ids = ids[:max_seq_len]
    token_ids = np.full(max_seq_len, PAD, dtype=np.int64)
    token_ids[:len(ids)] = ids
    mask = np.zeros(max_seq_len, dtype=bool)
    mask[:len(ids)] = True
    return Instance(token_ids=token_ids, mask=mask, label=label, text=text)


def instance_tokens(instance: Instance, vocab: Vocab) -> List[str]:
    """実トークン（CLS を含む）の文字列表現"""
    return [vocab.token_of(int(t)) for t in instance.token_ids[:instance.n_real]]


# ======================================================================
# パラメータ
# ======================================================================

def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """
    パラメータ名と形状（閉じた集合、この順序でシリアライズされる）

        token_embedding, position_embedding, embedding_norm.{gamma,beta}
        layers.{i}.attention.{query,key,value,output}.{weight,bias}
        layers.{i}.attention_norm.{gamma,beta}
        layers.{i}.ffn.{input,output}.{weight,bias}
        layers.{i}.ffn_norm.{gamma,beta}
        classifier.{weight,bias}
    """
    d, f = config.d_model, config.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {
        "token_embedding": (config.vocab_size, d),
        "position_embedding": (config.max_seq_len, d),
        "embedding_norm.gamma": (d,),
        "embedding_norm.beta": (d,),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}"
        for proj in ("query", "key", "value", "output"):
            shapes[f"{p}.attention.{proj}.weight"] = (d, d)
            shapes[f"{p}.attention.{proj}.bias"] = (d,)
        shapes[f"{p}.attention_norm.gamma"] = (d,)
        shapes[f"{p}.attention_norm.beta"] = (d,)
        shapes[f"{p}.ffn.input.weight"] = (d, f)
        shapes[f"{p}.ffn.input.bias"] = (f,)
        shapes[f"{p}.ffn.output.weight"] = (f, d)
        shapes[f"{p}.ffn.output.bias"] = (d,)
        shapes[f"{p}.ffn_norm.gamma"] = (d,)
        shapes[f"{p}.ffn_norm.beta"] = (d,)
    shapes["classifier.weight"] = (d, config.n_classes)
    shapes["classifier.bias"] = (config.n_classes,)
    return shapes


def init_parameters(config: ModelConfig, seed: int) -> Dict[str, np.ndarray]:
    """シード固定の初期化"""
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name == "token_embedding":
            value = rng.normal(0.0, 0.1, size=shape)
        elif name == "position_embedding":
            value = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".bias"):
            value = np.zeros(shape)
        elif name == "classifier.weight":
            value = rng.normal(0.0, 0.02, size=shape)
        else:
            value = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        params[name] = np.asarray(value, dtype=np.float64)
    return params


@dataclass(frozen=True)
class ModelCheckpoint:
    """学習済みパラメータ・語彙・構成（読み込み後は不変）"""
    config: ModelConfig
    vocab: Vocab
    params: Dict[str, np.ndarray]
    training: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        missing = [n for n in expected if n not in self.params]
        unknown = [n for n in self.params if n not in expected]
        if missing or unknown:
            raise InputError(f"パラメータ集合が不正です: missing={missing}, unknown={unknown}")
        if len(self.vocab) > self.config.vocab_size:
            raise InputError(f"語彙サイズ {len(self.vocab)} が vocab_size {self.config.vocab_size} を超えています")
        frozen = {}
        for name, shape in expected.items():
            array = np.array(self.params[name], dtype=np.float64, copy=True)
            if array.shape != shape:
                raise ShapeError(f"パラメータ {name} の形状が不正です", array.shape, shape)
            if not np.isfinite(array).all():
                raise InvalidValueError(f"パラメータ {name} に非有限値があります")
            array.setflags(write=False)
            frozen[name] = array
        object.__setattr__(self, "params", frozen)

    def tensors(self) -> Dict[str, Tensor]:
        """定数 Tensor としてのパラメータ（コピーなし）"""
        return {name: Tensor(array) for name, array in self.params.items()}


# ======================================================================
# 順伝播
# ======================================================================

def _affine(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    return matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def _norm(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    return layer_norm(x) * params[f"{prefix}.gamma"] + params[f"{prefix}.beta"]


def _batch_arrays(config: ModelConfig, token_ids, mask) -> Tuple[np.ndarray, np.ndarray]:
    token_ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if token_ids.shape != mask.shape or token_ids.shape[1] != config.max_seq_len:
        raise ShapeError("トークン列とマスクの形状が構成と一致しません", token_ids.shape, mask.shape)
    return token_ids, mask


def embed_tokens(checkpoint: ModelCheckpoint, token_ids, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """トークン埋め込み (B, S, d)"""
    params = params or checkpoint.tensors()
    return gather_rows(params["token_embedding"], np.atleast_2d(token_ids))


def hidden_from_embeddings(checkpoint: ModelCheckpoint, token_embeddings: Tensor,
                           params: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """埋め込み -> 層 0 の隠れ表現（位置埋め込み加算と正規化）"""
    params = params or checkpoint.tensors()
    return _norm(token_embeddings + params["position_embedding"], params, "embedding_norm")


def encoder_block(config: ModelConfig, hidden: Tensor, mask: np.ndarray,
                  params: Dict[str, Tensor], index: int) -> Tensor:
    """Post-LN エンコーダブロック"""
    batch, seq, d = hidden.shape
    heads, head_dim = config.n_heads, config.head_dim
    prefix = f"layers.{index}"

    def split_heads(x: Tensor) -> Tensor:
        return transpose(reshape(x, (batch, seq, heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(_affine(hidden, params, f"{prefix}.attention.query"))
    k = split_heads(_affine(hidden, params, f"{prefix}.attention.key"))
    v = split_heads(_affine(hidden, params, f"{prefix}.attention.value"))

    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(head_dim))
    key_mask = np.broadcast_to(mask[:, None, None, :], scores.shape)
    attention = softmax(scores, key_mask)
    context = reshape(transpose(matmul(attention, v), (0, 2, 1, 3)), (batch, seq, d))

    hidden = _norm(hidden + _affine(context, params, f"{prefix}.attention.output"),
                   params, f"{prefix}.attention_norm")
    ffn = _affine(gelu(_affine(hidden, params, f"{prefix}.ffn.input")), params, f"{prefix}.ffn.output")
    return _norm(hidden + ffn, params, f"{prefix}.ffn_norm")


def _check_layer(config: ModelConfig, layer: int) -> None:
    if not isinstance(layer, (int, np.integer)) or not 0 <= layer <= config.n_layers:
        raise RangeError(f"layer は 0..{config.n_layers} の範囲で指定してください: {layer}")


def hidden_at(checkpoint: ModelCheckpoint, token_ids, mask, layer: int,
              params: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """バッチ版 forward_lower: (B, S) -> (B, S, d)"""
    config = checkpoint.config
    _check_layer(config, layer)
    token_ids, mask = _batch_arrays(config, token_ids, mask)
    params = params or checkpoint.tensors()
    hidden = hidden_from_embeddings(checkpoint, embed_tokens(checkpoint, token_ids, params), params)
    for index in range(layer):
        hidden = encoder_block(config, hidden, mask, params, index)
    return hidden


def logits_from(checkpoint: ModelCheckpoint, hidden: Tensor, mask, layer: int,
                params: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """バッチ版: 層 l の出力 (B, S, d) から層 l+1..L と分類ヘッドを適用してロジット (B, C)"""
    config = checkpoint.config
    _check_layer(config, layer)
    if hidden.ndim != 3 or hidden.shape[1:] != (config.max_seq_len, config.d_model):
        raise ShapeError("隠れ表現の形状が構成と一致しません", hidden.shape, (config.max_seq_len, config.d_model))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if mask.shape[0] == 1 and hidden.shape[0] > 1:
        mask = np.broadcast_to(mask, (hidden.shape[0], mask.shape[1]))
    if mask.shape != hidden.shape[:2]:
        raise ShapeError("マスク形状が隠れ表現と一致しません", mask.shape, hidden.shape)
    params = params or checkpoint.tensors()
    for index in range(layer, config.n_layers):
        hidden = encoder_block(config, hidden, mask, params, index)
    cls_vector = take(hidden, 0, axis=1)
    return _affine(cls_vector, params, "classifier")


def forward_lower(checkpoint: ModelCheckpoint, instance: Instance, layer: int) -> Tensor:
    """X = f_l(H): 層 l 直後の隠れ表現 (S, d)"""
    hidden = hidden_at(checkpoint, instance.token_ids, instance.mask, layer)
    return reshape(hidden, hidden.shape[1:])


def forward_from(checkpoint: ModelCheckpoint, hidden: Tensor, mask, layer: int) -> Tensor:
    """
    層 l の出力（またはボトルネック出力 T）からクラス確率を計算する

    Args:
        hidden: (S, d) または (B, S, d)
        mask: (S,) または (B, S)

    Returns:
        (C,) または (B, C) の確率
    """
    single = hidden.ndim == 2
    batched = reshape(hidden, (1,) + hidden.shape) if single else hidden
    probs = softmax(logits_from(checkpoint, batched, mask, layer))
    if not probs.is_finite():
        raise InvalidValueError("順伝播で NaN/Inf が発生しました")
    return reshape(probs, probs.shape[1:]) if single else probs


def forward(checkpoint: ModelCheckpoint, instance: Instance) -> Tensor:
    """クラス確率 (C,)"""
    top = checkpoint.config.n_layers
    return forward_from(checkpoint, forward_lower(checkpoint, instance, top), instance.mask, top)


def predict_proba(checkpoint: ModelCheckpoint, token_ids, mask, batch_size: int = 64) -> np.ndarray:
    """勾配なしのバッチ推論 (N, C)"""
    token_ids = np.atleast_2d(token_ids)
    mask = np.atleast_2d(mask)
    params = checkpoint.tensors()
    top = checkpoint.config.n_layers
    outputs = []
    for start in range(0, token_ids.shape[0], batch_size):
        ids = token_ids[start:start + batch_size]
        m = mask[start:start + batch_size]
        hidden = hidden_at(checkpoint, ids, m, top, params)
        outputs.append(softmax(logits_from(checkpoint, hidden, m, top, params)).data)
    probs = np.concatenate(outputs, axis=0) if outputs else np.zeros((0, checkpoint.config.n_classes))
    if not np.isfinite(probs).all():
        raise InvalidValueError("順伝播で NaN/Inf が発生しました")
    return probs
