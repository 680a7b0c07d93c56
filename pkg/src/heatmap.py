"""
寄与度ヒートマップ（HTML / PNG）

色はインスタンスごとの min-max 正規化（白 -> 赤）。全スコアが等しい場合は全トークンが 0（白）。
"""
import html
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .attribution import AttributionMap


RGB = Tuple[int, int, int]


def normalize_scores(scores) -> np.ndarray:
    """min-max 正規化（定数なら 0）"""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return scores
    low, high = scores.min(), scores.max()
    if high == low:
        return np.zeros_like(scores)
    return (scores - low) / (high - low)


def score_color(value: float) -> RGB:
    """0 -> 白, 1 -> 赤"""
    fade = int(round(255 * (1.0 - float(np.clip(value, 0.0, 1.0)))))
    return 255, fade, fade


def render_html(attribution: AttributionMap) -> str:
    """トークンごとに背景色を付けた span 列（生スコアは data-score 属性）"""
    values = normalize_scores(attribution.scores)
    spans: List[str] = []
    for index, (token, score, value) in enumerate(zip(attribution.tokens, attribution.scores, values)):
        r, g, b = score_color(value)
        classes = "token cls" if index == attribution.cls_index else "token"
        spans.append(
            f'<span class="{classes}" data-index="{index}" data-score="{float(score)!r}" '
            f'data-norm="{float(value):.6f}" style="background-color: rgb({r}, {g}, {b})">'
            f'{html.escape(token)}</span>'
        )
    title = html.escape(f"{attribution.method} (target={attribution.target})")
    return (
        "<!DOCTYPE html>\n"
        '<html lang="en">\n<head>\n<meta charset="utf-8">\n'
        f"<title>{title}</title>\n"
        "<style>.token { padding: 2px 4px; margin: 1px; border-radius: 3px; font-family: monospace; }\n"
        ".cls { outline: 1px dashed #888; }</style>\n"
        "</head>\n<body>\n"
        f"<h3>{title}</h3>\n"
        f'<p class="tokens">{" ".join(spans)}</p>\n'
        "</body>\n</html>\n"
    )


def write_html(attribution: AttributionMap, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_html(attribution), encoding="utf-8")
    return path


def render_png(attribution: AttributionMap, path: Union[str, Path], max_width: int = 800,
               padding: int = 4) -> Path:
    """同じ配色で PNG 画像に描画する"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    font = ImageFont.load_default()
    measure = ImageDraw.Draw(Image.new("RGB", (1, 1)))

    boxes = []
    x = y = padding
    line_height = 0
    for token in attribution.tokens:
        left, top, right, bottom = measure.textbbox((0, 0), token, font=font)
        width, height = right - left + 2 * padding, bottom - top + 2 * padding
        if x + width > max_width and x > padding:
            x = padding
            y += line_height + padding
            line_height = 0
        boxes.append((x, y, width, height))
        x += width + padding
        line_height = max(line_height, height)

    image = Image.new("RGB", (max_width, y + line_height + padding), (255, 255, 255))
    draw = ImageDraw.Draw(image)
    for token, value, (bx, by, width, height) in zip(attribution.tokens, normalize_scores(attribution.scores), boxes):
        draw.rectangle([bx, by, bx + width, by + height], fill=score_color(value))
        draw.text((bx + padding, by + padding), token, fill=(0, 0, 0), font=font)
    image.save(path, format="PNG")
    return path
