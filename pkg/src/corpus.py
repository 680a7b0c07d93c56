"""
コーパスの読み込み・合成・分割

形式: UTF-8、1行1例の JSON オブジェクト {"label": 整数, "text": 文字列}。
'#' で始まる行と空行は無視する。
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .error_handler import FormatError, InputError, get_logger


POSITIVE_KEYWORDS = (
    "excellent", "wonderful", "delightful", "superb", "brilliant",
    "enjoyable", "charming", "masterful", "moving", "terrific",
)
NEGATIVE_KEYWORDS = (
    "terrible", "awful", "boring", "dreadful", "horrible",
    "tedious", "clumsy", "painful", "mediocre", "disappointing",
)
DISTRACTORS = (
    "the", "a", "movie", "film", "story", "actor", "actress", "scene", "plot", "director",
    "music", "camera", "script", "ending", "beginning", "character", "dialogue", "screen", "theater", "ticket",
    "audience", "sequel", "cast", "role", "set", "light", "color", "sound", "minute", "hour",
    "night", "day", "city", "house", "car", "train", "road", "river", "forest", "island",
    "was", "is", "were", "seemed", "felt", "became", "looked", "played", "watched", "saw",
    "and", "but", "with", "about", "after", "before", "during", "while", "then", "also",
    "very", "quite", "rather", "really", "almost", "mostly", "often", "sometimes", "again", "still",
    "first", "second", "last", "long", "short", "old", "new", "young", "big", "small",
)

logger = get_logger(__name__)


@dataclass(frozen=True)
class Example:
    """ラベル付きテキスト"""
    label: int
    text: str


def parse_corpus(lines: Sequence[str], source: str = "<corpus>") -> List[Example]:
    """JSON 行の列を解析する"""
    examples = []
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            record = json.loads(stripped)
        except json.JSONDecodeError as e:
            raise FormatError(f"{source}:{line_no}: JSON を解析できません ({e.msg})") from None
        if not isinstance(record, dict):
            raise FormatError(f"{source}:{line_no}: JSON オブジェクトではありません")
        label, text = record.get("label"), record.get("text")
        if not isinstance(label, int) or isinstance(label, bool) or label < 0:
            raise FormatError(f"{source}:{line_no}: label は 0 以上の整数である必要があります")
        if not isinstance(text, str):
            raise FormatError(f"{source}:{line_no}: text は文字列である必要があります")
        examples.append(Example(label=label, text=text))
    return examples


def load_corpus(path: Union[str, Path]) -> List[Example]:
    """コーパスファイルを読み込む"""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        examples = parse_corpus(f.read().splitlines(), source=str(path))
    if not examples:
        raise InputError(f"コーパスが空です: {path}")
    logger.info(f"コーパスを読み込みました: {path} ({len(examples)} 件)")
    return examples


def generate_synthetic_corpus(size: int, seed: int) -> List[str]:
    """
    キーワードでラベルが決まる合成感情コーパス（ヘッダ行を含む）

    各例のラベルは公平なコインで決め、そのラベルの極性キーワードを1〜2語、
    無関係語を6〜14語ランダムな位置に混ぜる。
    """
    if size < 0:
        raise InputError(f"size は 0 以上である必要があります: {size}")
    rng = np.random.default_rng(seed)
    lines = [
        "# ibakit synthetic sentiment corpus",
        f"# size={size} seed={seed}",
        "# label ~ fair coin (1 = positive, 0 = negative)",
        "# text = 1-2 keywords of the label's polarity + 6-14 distractor words, shuffled",
        f"# positive keywords: {' '.join(POSITIVE_KEYWORDS)}",
        f"# negative keywords: {' '.join(NEGATIVE_KEYWORDS)}",
    ]
    for _ in range(size):
        label = int(rng.integers(0, 2))
        keywords = POSITIVE_KEYWORDS if label == 1 else NEGATIVE_KEYWORDS
        n_keywords = int(rng.integers(1, 3))
        n_distractors = int(rng.integers(6, 15))
        words = [keywords[i] for i in rng.integers(0, len(keywords), n_keywords)]
        words += [DISTRACTORS[i] for i in rng.integers(0, len(DISTRACTORS), n_distractors)]
        order = rng.permutation(len(words))
        text = " ".join(words[i] for i in order)
        lines.append(json.dumps({"label": label, "text": text}, ensure_ascii=False))
    return lines


def write_corpus(lines: Sequence[str], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    return path


def split_corpus(examples: Sequence[Example], seed: int,
                 fractions: Tuple[float, float] = (0.8, 0.1)) -> Tuple[List[Example], List[Example], List[Example]]:
    """
    シード固定の並べ替えで train / validation / test に分割（既定 80/10/10）
    """
    n = len(examples)
    if n == 0:
        raise InputError("コーパスが空です")
    order = np.random.default_rng([int(seed), 0x5EED]).permutation(n)
    n_train = int(n * fractions[0])
    n_validation = int(n * fractions[1])
    shuffled = [examples[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train:n_train + n_validation],
        shuffled[n_train + n_validation:],
    )
