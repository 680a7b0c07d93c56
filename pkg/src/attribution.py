"""
トークン寄与度マップと、インスタンス単位の並列実行
"""
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .error_handler import InputError, InvalidValueError, get_logger
from .model import Instance, RESERVED_TOKENS


CLS_TOKEN = RESERVED_TOKENS[2]

logger = get_logger(__name__)


@dataclass
class AttributionMap:
    """
    1インスタンスの寄与度

    tokens / scores は CLS を含む実トークン（PAD を除く）。CLS は常に先頭（cls_index = 0）で、
    スコアは報告するが劣化テストでは削除しない。
    """
    method: str
    tokens: List[str]
    scores: np.ndarray
    target: int
    seed: int
    layer: Optional[int] = None
    beta: Optional[float] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.tokens),):
            raise InputError(f"スコア数 {self.scores.shape} とトークン数 {len(self.tokens)} が一致しません")
        if not np.isfinite(self.scores).all():
            raise InvalidValueError(f"{self.method} の寄与度に非有限値があります")

    @property
    def cls_index(self) -> Optional[int]:
        return 0 if self.tokens and self.tokens[0] == CLS_TOKEN else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "layer": self.layer,
            "beta": self.beta,
            "tokens": list(self.tokens),
            "scores": [float(s) for s in self.scores],
            "target": int(self.target),
            "seed": int(self.seed),
        }

    def to_json(self, extra: Optional[Dict[str, Any]] = None) -> str:
        data = self.to_dict()
        if extra:
            data.update(extra)
        return json.dumps(data, ensure_ascii=False, indent=2)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttributionMap":
        valid, errors = validate_attribution(data)
        if not valid:
            raise InputError("; ".join(errors))
        return cls(
            method=data["method"],
            tokens=list(data["tokens"]),
            scores=np.asarray(data["scores"], dtype=np.float64),
            target=int(data["target"]),
            seed=int(data["seed"]),
            layer=data.get("layer"),
            beta=data.get("beta"),
        )


def validate_attribution(data: Dict[str, Any]) -> Tuple[bool, List[str]]:
    """
    AttributionMap JSON のスキーマ検証

    Returns:
        (検証結果, エラーメッセージリスト)
    """
    errors = []
    required = {"method": str, "tokens": list, "scores": list, "target": int, "seed": int}
    for key, expected_type in required.items():
        if key not in data:
            errors.append(f"必須キー {key} がありません")
        elif not isinstance(data[key], expected_type) or isinstance(data[key], bool):
            errors.append(f"{key} の型が不正です: {type(data[key]).__name__}")

    if "layer" in data and data["layer"] is not None and not isinstance(data["layer"], int):
        errors.append("layer は整数または null である必要があります")
    if "beta" in data and data["beta"] is not None:
        if not isinstance(data["beta"], (int, float)) or data["beta"] <= 0:
            errors.append("beta は正の数または null である必要があります")

    if not errors:
        if len(data["tokens"]) != len(data["scores"]):
            errors.append("tokens と scores の長さが一致しません")
        if not all(isinstance(t, str) for t in data["tokens"]):
            errors.append("tokens は文字列のリストである必要があります")
        scores = data["scores"]
        if not all(isinstance(s, (int, float)) and not isinstance(s, bool) for s in scores):
            errors.append("scores は数値のリストである必要があります")
        elif not np.isfinite(np.asarray(scores, dtype=np.float64)).all():
            errors.append("scores に非有限値があります")
        elif data.get("method") in ("iba", "x-only") and any(s < 0 for s in scores):
            errors.append("IBA のスコアは非負である必要があります")

    return len(errors) == 0, errors


R = TypeVar("R")
AttributeFn = Callable[[int, Instance, int, np.random.Generator], R]


def instance_rng(seed: int, index: int) -> np.random.Generator:
    """(グローバルシード, インスタンス番号) から独立な乱数列"""
    return np.random.default_rng([int(seed), int(index)])


def attribute_dataset(instances: Sequence[Instance], targets: Sequence[int], attribute_one: AttributeFn,
                      seed: int, jobs: int = 1) -> List[R]:
    """
    全インスタンスの寄与度を計算する（結果はインスタンス順）

    Args:
        attribute_one: (index, instance, target, rng) -> AttributionMap（または任意の結果）
        jobs: 同時実行数の上限
    """
    if len(instances) != len(targets):
        raise InputError(f"インスタンス数 {len(instances)} とターゲット数 {len(targets)} が一致しません")

    def run(index: int) -> R:
        return attribute_one(index, instances[index], int(targets[index]), instance_rng(seed, index))

    if jobs <= 1 or len(instances) <= 1:
        return [run(i) for i in range(len(instances))]

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        results = list(executor.map(run, range(len(instances))))
    logger.debug(f"{len(results)} 件の寄与度を {jobs} 並列で計算しました")
    return results
