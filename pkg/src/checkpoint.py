"""
チェックポイントの保存・読み込み

形式:
    8 バイトのマジック "IBAKIT01"
    ヘッダ長 (uint64 リトルエンディアン)
    UTF-8 JSON ヘッダ {format_version, config, vocab, training, parameters}
        parameters はマニフェスト順の [{name, shape, offset, nbytes}]
    リトルエンディアン float64 のペイロード（マニフェスト順に連結）
"""
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from .error_handler import (
    FormatError, MissingParameterError, TruncatedFileError, UnknownParameterError,
    VersionMismatchError, get_logger,
)
from .model import ModelCheckpoint, ModelConfig, Vocab, parameter_shapes


MAGIC = b"IBAKIT01"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")
_PAYLOAD_DTYPE = np.dtype("<f8")

logger = get_logger(__name__)


def _manifest(checkpoint: ModelCheckpoint):
    entries = []
    offset = 0
    for name, shape in parameter_shapes(checkpoint.config).items():
        nbytes = int(np.prod(shape, dtype=np.int64)) * _PAYLOAD_DTYPE.itemsize
        entries.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return entries


def encode_checkpoint(checkpoint: ModelCheckpoint) -> bytes:
    """チェックポイントをバイト列にエンコード"""
    manifest = _manifest(checkpoint)
    header = {
        "format_version": FORMAT_VERSION,
        "config": checkpoint.config.to_dict(),
        "vocab": list(checkpoint.vocab.tokens),
        "training": checkpoint.training,
        "parameters": manifest,
    }
    header_bytes = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(checkpoint.params[entry["name"]], dtype=_PAYLOAD_DTYPE).tobytes()
        for entry in manifest
    )
    return MAGIC + _LENGTH.pack(len(header_bytes)) + header_bytes + payload


def save_checkpoint(checkpoint: ModelCheckpoint, path: Union[str, Path]) -> Path:
    """チェックポイントをファイルに保存"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(checkpoint)
    with open(path, "wb") as f:
        f.write(data)
    logger.info(f"チェックポイントを保存しました: {path} ({len(data)} bytes)")
    return path


def _read_header(data: bytes) -> Dict[str, Any]:
    if len(data) < len(MAGIC):
        raise TruncatedFileError("マジックバイトの途中でファイルが終わっています")
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"マジックバイトが不正です: {data[:len(MAGIC)]!r}")
    start = len(MAGIC) + _LENGTH.size
    if len(data) < start:
        raise TruncatedFileError("ヘッダ長の途中でファイルが終わっています")
    (header_len,) = _LENGTH.unpack(data[len(MAGIC):start])
    if len(data) < start + header_len:
        raise TruncatedFileError(f"ヘッダが途中で切れています: 必要 {header_len} bytes")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"ヘッダ JSON を解析できません: {e}") from None
    if not isinstance(header, dict):
        raise FormatError("ヘッダが JSON オブジェクトではありません")

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"フォーマットバージョン {version} は未対応です (対応: {FORMAT_VERSION})")
    for key in ("config", "vocab", "parameters"):
        if key not in header:
            raise FormatError(f"ヘッダに {key} がありません")
    header["_payload_start"] = start + header_len
    return header


def decode_checkpoint(data: bytes) -> ModelCheckpoint:
    """バイト列からチェックポイントを復元"""
    header = _read_header(data)
    try:
        config = ModelConfig(**header["config"])
    except TypeError as e:
        raise FormatError(f"モデル構成が不正です: {e}") from None
    vocab = Vocab(list(header["vocab"]))
    expected = parameter_shapes(config)

    payload_start = header["_payload_start"]
    payload_len = len(data) - payload_start
    params: Dict[str, np.ndarray] = {}
    for entry in header["parameters"]:
        name = entry.get("name")
        if name not in expected:
            raise UnknownParameterError(f"未知のパラメータ名です: {name}")
        if name in params:
            raise FormatError(f"パラメータ {name} が重複しています")
        shape = tuple(entry.get("shape", ()))
        if shape != expected[name]:
            raise FormatError(f"パラメータ {name} の形状 {shape} が構成 {expected[name]} と一致しません")
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _PAYLOAD_DTYPE.itemsize:
            raise FormatError(f"パラメータ {name} のバイト数が形状と一致しません")
        if offset < 0 or offset + nbytes > payload_len:
            raise TruncatedFileError(f"パラメータ {name} のペイロードが途中で切れています")
        start = payload_start + offset
        params[name] = np.frombuffer(data[start:start + nbytes], dtype=_PAYLOAD_DTYPE).reshape(shape)

    missing = [name for name in expected if name not in params]
    if missing:
        raise MissingParameterError(f"パラメータが欠落しています: {', '.join(missing)}")

    return ModelCheckpoint(
        config=config,
        vocab=vocab,
        params={name: params[name].astype(np.float64) for name in expected},
        training=dict(header.get("training") or {}),
    )


def load_checkpoint(path: Union[str, Path]) -> ModelCheckpoint:
    """ファイルからチェックポイントを読み込む（パラメータは読み取り専用）"""
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    checkpoint = decode_checkpoint(data)
    logger.info(f"チェックポイントを読み込みました: {path}")
    return checkpoint


def checkpoint_fingerprint(checkpoint: ModelCheckpoint) -> str:
    """全パラメータの SHA-256（汚染検出用）"""
    digest = hashlib.sha256()
    for name in parameter_shapes(checkpoint.config):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(checkpoint.params[name], dtype=_PAYLOAD_DTYPE).tobytes())
    return digest.hexdigest()
