"""
エラーハンドリング・ログ機能 テストケース
"""
import io
import logging
import shutil
import tempfile
from pathlib import Path

import pytest

from src.error_handler import (
    EXIT_CODES, LOGGER_ROOT, ConfigError, ErrorCategory, ErrorInfo, ErrorLevel, ErrorLogger, FormatError,
    GlobalErrorHandler, IbaKitError, InputError, OptimizationError, ShapeError, TruncatedFileError, UsageError,
    get_logger, setup_logging,
)


class TestErrorInfo:
    """ErrorInfo クラスのテスト"""

    def test_error_info_creation(self):
        """ErrorInfo の作成テスト"""
        error_info = ErrorInfo(
            level=ErrorLevel.ERROR,
            category=ErrorCategory.FORMAT,
            message="テストエラー",
            details="詳細情報",
            context={"path": "model.ibak"},
        )
        assert error_info.level == ErrorLevel.ERROR
        assert error_info.category == ErrorCategory.FORMAT
        assert error_info.context == {"path": "model.ibak"}
        assert error_info.timestamp is not None

    def test_error_info_defaults(self):
        """ErrorInfo のデフォルト値テスト"""
        error_info = ErrorInfo(level=ErrorLevel.WARNING, category=ErrorCategory.SYSTEM, message="警告")
        assert error_info.details is None
        assert error_info.exception is None
        assert error_info.context == {}
        assert error_info.suggestion is None


class TestExceptions:
    """例外階層"""

    def test_categories(self):
        assert InputError("x").category == ErrorCategory.INPUT
        assert TruncatedFileError("x").category == ErrorCategory.FORMAT
        assert isinstance(TruncatedFileError("x"), FormatError)
        assert issubclass(UsageError, IbaKitError)

    def test_context_is_kept(self):
        error = InputError("bad", index=3)
        assert error.message == "bad"
        assert error.context == {"index": 3}

    def test_shape_error_formats_shapes(self):
        error = ShapeError("不一致", (2, 3), (3,))
        assert "(2, 3) vs (3,)" in str(error)
        assert error.shapes == [(2, 3), (3,)]

    def test_optimization_error_carries_trace(self):
        trace = [{"step": 0, "ce": 0.5, "kl": 1.0, "total": 0.6}]
        error = OptimizationError("nan", trace)
        assert error.trace == trace
        assert error.trace is not trace


class TestErrorLogger:
    """ErrorLogger クラスのテスト"""

    def setup_method(self):
        self.stream = io.StringIO()
        self.logger = logging.getLogger(f"{LOGGER_ROOT}.test_error_logger")
        self.logger.handlers.clear()
        self.logger.addHandler(logging.StreamHandler(self.stream))
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False
        self.error_logger = ErrorLogger(self.logger, max_history=3)

    def teardown_method(self):
        self.logger.handlers.clear()

    def test_log_error_basic(self):
        """基本的なエラーログ記録"""
        self.error_logger.log_error(ErrorInfo(
            level=ErrorLevel.ERROR, category=ErrorCategory.CONFIG, message="設定エラー", context={"key": "beta"},
        ))
        output = self.stream.getvalue()
        assert "[config] 設定エラー" in output
        assert "key=beta" in output

    def test_log_error_with_exception(self):
        """例外付きのログにはトレースバックが含まれる"""
        try:
            raise ValueError("boom")
        except ValueError as e:
            self.error_logger.log_error(ErrorInfo(
                level=ErrorLevel.ERROR, category=ErrorCategory.SYSTEM, message="失敗", exception=e,
            ))
        assert "ValueError: boom" in self.stream.getvalue()

    def test_error_history_limit(self):
        """履歴は max_history 件まで"""
        for i in range(5):
            self.error_logger.log_error(ErrorInfo(level=ErrorLevel.INFO, category=ErrorCategory.SYSTEM,
                                                  message=f"m{i}"))
        history = self.error_logger.get_error_history()
        assert [e.message for e in history] == ["m2", "m3", "m4"]
        assert [e.message for e in self.error_logger.get_error_history(limit=1)] == ["m4"]

    def test_clear_history(self):
        self.error_logger.log_error(ErrorInfo(level=ErrorLevel.INFO, category=ErrorCategory.SYSTEM, message="m"))
        self.error_logger.clear_history()
        assert self.error_logger.get_error_history() == []


class TestLoggingSetup:
    """ログ設定"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        logger = logging.getLogger(LOGGER_ROOT)
        for handler in logger.handlers[:]:
            logger.removeHandler(handler)
            handler.close()
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_child_logger_names(self):
        assert get_logger("src.iba").name == f"{LOGGER_ROOT}.iba"

    def test_file_logging(self):
        logger = setup_logging(self.temp_dir, verbose=False)
        get_logger("src.iba").info("ファイルに記録")
        for handler in logger.handlers:
            handler.flush()
        log_files = list(Path(self.temp_dir).glob("ibakit_*.log"))
        assert len(log_files) == 1
        assert "ファイルに記録" in log_files[0].read_text(encoding="utf-8")

    # TC-010: 処理済みエラーのトレースバックはファイルにのみ記録される
    @pytest.mark.parametrize("verbose", [False, True])
    def test_handled_error_stays_off_console(self, capsys, verbose):
        logger = setup_logging(self.temp_dir, verbose=verbose)
        try:
            raise InputError("index は範囲外です")
        except InputError as e:
            code = GlobalErrorHandler().handle_error(e)
        for handler in logger.handlers:
            handler.flush()

        assert code == 3
        assert capsys.readouterr().err == "error: input: index は範囲外です\n"
        log_text = next(Path(self.temp_dir).glob("ibakit_*.log")).read_text(encoding="utf-8")
        assert "[input] index は範囲外です" in log_text
        assert "Traceback" in log_text

    def test_unhandled_warning_reaches_console(self, capsys):
        setup_logging(verbose=False)
        get_logger("src.iba").warning("警告メッセージ")
        assert "警告メッセージ" in capsys.readouterr().err

    def test_console_level(self):
        quiet = setup_logging(verbose=False)
        assert quiet.handlers[0].level == logging.WARNING
        loud = setup_logging(verbose=True)
        assert len(loud.handlers) == 1
        assert loud.handlers[0].level == logging.INFO


class TestGlobalErrorHandler:
    """GlobalErrorHandler クラスのテスト"""

    def setup_method(self):
        self.stream = io.StringIO()
        self.handler = GlobalErrorHandler(stream=self.stream,
                                          logger=ErrorLogger(logging.getLogger(f"{LOGGER_ROOT}.test_handler")))

    # TC-001: 1行の "error:" メッセージと終了コード
    @pytest.mark.parametrize("error,category,code", [
        (UsageError("unknown method"), "usage", 2),
        (ConfigError("bad beta"), "config", 2),
        (InputError("empty corpus"), "input", 3),
        (TruncatedFileError("short file"), "format", 3),
        (OptimizationError("nan loss"), "optimization", 4),
        (RuntimeError("unexpected"), "system", 1),
    ])
    def test_handle_error(self, error, category, code):
        assert self.handler.handle_error(error) == code
        output = self.stream.getvalue()
        assert output.startswith(f"error: {category}: ")
        assert output.count("\n") == 1

    def test_multiline_message_is_flattened(self):
        self.handler.handle_error(InputError("line one\nline two"))
        assert self.stream.getvalue() == "error: input: line one line two\n"

    def test_os_error_category(self):
        code = self.handler.handle_error(FileNotFoundError(2, "No such file", "corpus.jsonl"))
        assert code == EXIT_CODES.get(ErrorCategory.FILE_IO, 1)
        assert self.stream.getvalue().startswith("error: file-io: ")

    def test_error_is_recorded(self):
        self.handler.handle_error(ConfigError("bad"))
        history = self.handler.logger.get_error_history()
        assert history[-1].category == ErrorCategory.CONFIG
        assert history[-1].suggestion is not None
