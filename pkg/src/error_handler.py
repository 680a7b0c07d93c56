"""
エラーハンドリング・ログ機能

全モジュール共通の例外階層、エラー情報の記録、ログ設定を提供する。
CLI では GlobalErrorHandler が例外を1行の "error:" メッセージと終了コードに変換する。
"""
import sys
import logging
import traceback
from pathlib import Path
from datetime import datetime
from typing import Optional, Dict, List, Any, Sequence
from dataclasses import dataclass, field
from enum import Enum


LOGGER_ROOT = "ibakit"


class ErrorLevel(Enum):
    """エラーレベル"""
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class ErrorCategory(Enum):
    """エラーカテゴリ"""
    INPUT = "input"
    SHAPE = "shape"
    INVALID_VALUE = "invalid-value"
    CONTRACT = "contract"
    RANGE = "range"
    FORMAT = "format"
    CONFIG = "config"
    USAGE = "usage"
    OPTIMIZATION = "optimization"
    NUMERIC = "numeric"
    NORMALIZATION = "normalization"
    CONTAMINATION = "contamination"
    FILE_IO = "file-io"
    SYSTEM = "system"


# カテゴリ別の終了コード
EXIT_CODES = {
    ErrorCategory.USAGE: 2,
    ErrorCategory.CONFIG: 2,
    ErrorCategory.INPUT: 3,
    ErrorCategory.FORMAT: 3,
    ErrorCategory.RANGE: 3,
    ErrorCategory.NUMERIC: 4,
    ErrorCategory.OPTIMIZATION: 4,
}


class IbaKitError(Exception):
    """ibakit 共通の基底例外"""
    category = ErrorCategory.SYSTEM

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context


class InputError(IbaKitError):
    """入力データが前提条件を満たさない"""
    category = ErrorCategory.INPUT


class ShapeError(IbaKitError):
    """テンソル形状の不一致"""
    category = ErrorCategory.SHAPE

    def __init__(self, message: str, *shapes: Sequence[int]):
        shape_text = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{message}: {shape_text}" if shapes else message)
        self.shapes = [tuple(s) for s in shapes]


class InvalidValueError(IbaKitError):
    """NaN / Inf の検出"""
    category = ErrorCategory.INVALID_VALUE


class ContractError(IbaKitError):
    """API 契約違反（非スカラーへの backward、二重 backward など）"""
    category = ErrorCategory.CONTRACT


class RangeError(IbaKitError):
    """引数が許容範囲外"""
    category = ErrorCategory.RANGE


class FormatError(IbaKitError):
    """ファイル形式エラー"""
    category = ErrorCategory.FORMAT


class VersionMismatchError(FormatError):
    """チェックポイントのフォーマットバージョン不一致"""


class TruncatedFileError(FormatError):
    """ファイルが途中で切れている"""


class UnknownParameterError(FormatError):
    """未知のパラメータ名"""


class MissingParameterError(FormatError):
    """必須パラメータの欠落"""


class ConfigError(IbaKitError):
    """設定値エラー"""
    category = ErrorCategory.CONFIG


class UsageError(IbaKitError):
    """コマンドライン使用法エラー"""
    category = ErrorCategory.USAGE


class OptimizationError(IbaKitError):
    """最適化中の非有限値"""
    category = ErrorCategory.OPTIMIZATION

    def __init__(self, message: str, trace: Optional[List[Dict[str, float]]] = None):
        super().__init__(message)
        self.trace = list(trace or [])


class NumericError(IbaKitError):
    """数値計算の失敗（特異な正規方程式など）"""
    category = ErrorCategory.NUMERIC


class NormalizationError(IbaKitError):
    """劣化曲線の正規化が定義できない"""
    category = ErrorCategory.NORMALIZATION


class ContaminationError(IbaKitError):
    """評価用チェックポイントが変更されている"""
    category = ErrorCategory.CONTAMINATION


@dataclass
class ErrorInfo:
    """エラー情報"""
    level: ErrorLevel
    category: ErrorCategory
    message: str
    details: Optional[str] = None
    exception: Optional[BaseException] = None
    timestamp: datetime = field(default_factory=datetime.now)
    context: Dict[str, Any] = field(default_factory=dict)
    suggestion: Optional[str] = None


def get_logger(name: str) -> logging.Logger:
    """ibakit 配下のロガーを取得"""
    short = name.rsplit(".", 1)[-1]
    return logging.getLogger(f"{LOGGER_ROOT}.{short}")


class ConsoleFilter(logging.Filter):
    """extra={"console": False} のレコードはコンソールに出さない（ファイルにのみ記録）"""

    def filter(self, record: logging.LogRecord) -> bool:
        return getattr(record, "console", True)


def setup_logging(log_dir: Optional[str] = None, verbose: bool = False) -> logging.Logger:
    """
    ログの設定

    Args:
        log_dir: ログファイル出力先。未指定時はコンソールのみ
        verbose: True の場合コンソールに INFO も出力

    Returns:
        ibakit ルートロガー
    """
    logger = logging.getLogger(LOGGER_ROOT)
    logger.setLevel(logging.DEBUG)
    logger.propagate = False

    # 既存のハンドラをクリア
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.INFO if verbose else logging.WARNING)
    console_handler.setFormatter(formatter)
    console_handler.addFilter(ConsoleFilter())
    logger.addHandler(console_handler)

    if log_dir:
        path = Path(log_dir)
        path.mkdir(parents=True, exist_ok=True)
        log_file = path / f"ibakit_{datetime.now().strftime('%Y%m%d')}.log"
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


class ErrorLogger:
    """エラーログ管理クラス"""

    def __init__(self, logger: Optional[logging.Logger] = None, max_history: int = 1000):
        """エラーログ管理の初期化"""
        self.logger = logger or get_logger("errors")
        self._error_history: List[ErrorInfo] = []
        self._max_history = max_history

    def log_error(self, error_info: ErrorInfo, console: bool = True) -> None:
        """
        エラーをログに記録

        Args:
            console: False の場合コンソールハンドラには出力しない
        """
        self._error_history.append(error_info)
        if len(self._error_history) > self._max_history:
            self._error_history.pop(0)

        level = getattr(logging, error_info.level.value)
        self.logger.log(level, self._format_error_message(error_info), extra={"console": console})

    def _format_error_message(self, error_info: ErrorInfo) -> str:
        """エラーメッセージのフォーマット"""
        parts = [f"[{error_info.category.value}] {error_info.message}"]

        if error_info.details:
            parts.append(f"詳細: {error_info.details}")

        if error_info.context:
            context_str = ", ".join(f"{k}={v}" for k, v in error_info.context.items())
            parts.append(f"コンテキスト: {context_str}")

        if error_info.exception is not None and error_info.exception.__traceback__:
            tb_lines = traceback.format_exception(
                type(error_info.exception),
                error_info.exception,
                error_info.exception.__traceback__
            )
            parts.append("トレースバック:")
            parts.extend(line.rstrip() for line in tb_lines)

        return "\n".join(parts)

    def get_error_history(self, limit: Optional[int] = None) -> List[ErrorInfo]:
        """エラー履歴を取得"""
        if limit:
            return self._error_history[-limit:]
        return self._error_history.copy()

    def clear_history(self) -> None:
        """エラー履歴をクリア"""
        self._error_history.clear()


class GlobalErrorHandler:
    """CLI 用のグローバルエラーハンドラー"""

    SUGGESTIONS = {
        ErrorCategory.CONFIG: "設定ファイルとフラグの値を確認してください",
        ErrorCategory.USAGE: "--help で使用法を確認してください",
        ErrorCategory.FORMAT: "ファイルが ibakit で書き出されたものか確認してください",
        ErrorCategory.FILE_IO: "ファイルのアクセス権限とパスを確認してください",
        ErrorCategory.OPTIMIZATION: "--beta や --lr を小さくして再実行してください",
    }

    def __init__(self, stream=None, logger: Optional[ErrorLogger] = None):
        self.stream = stream
        self.logger = logger or ErrorLogger()

    def handle_error(self, error: BaseException) -> int:
        """
        例外をログに記録し、1行のエラーメッセージを出力する

        Returns:
            プロセス終了コード
        """
        error_info = self._create_error_info(error)
        # 標準エラーには下の1行だけを出す
        self.logger.log_error(error_info, console=False)

        message = " ".join(error_info.message.split())
        stream = self.stream or sys.stderr
        print(f"error: {error_info.category.value}: {message}", file=stream)
        return EXIT_CODES.get(error_info.category, 1)

    def _create_error_info(self, error: BaseException) -> ErrorInfo:
        """エラー情報を作成"""
        if isinstance(error, IbaKitError):
            category = error.category
            context = dict(error.context)
            level = ErrorLevel.ERROR
        elif isinstance(error, OSError):
            category = ErrorCategory.FILE_IO
            context = {"errno": error.errno}
            level = ErrorLevel.ERROR
        else:
            category = ErrorCategory.SYSTEM
            context = {"type": type(error).__name__}
            level = ErrorLevel.CRITICAL

        return ErrorInfo(
            level=level,
            category=category,
            message=str(error) or type(error).__name__,
            exception=error,
            context=context,
            suggestion=self.SUGGESTIONS.get(category),
        )
