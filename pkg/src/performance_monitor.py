"""
処理段階ごとの実行時間・メモリ計測

計測結果はログにのみ出力し、成果物ファイルには書き込まない。
"""
import time
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, Iterator, List, Optional

import psutil

from .error_handler import get_logger


logger = get_logger(__name__)


@dataclass
class PerformanceMetrics:
    """パフォーマンス指標"""
    timestamp: datetime = field(default_factory=datetime.now)
    cpu_percent: float = 0.0
    memory_mb: float = 0.0
    thread_count: int = 0


@dataclass
class StageRecord:
    """1段階の計測結果"""
    name: str
    elapsed_seconds: float
    memory_start_mb: float
    memory_end_mb: float
    success: bool = True

    @property
    def memory_delta_mb(self) -> float:
        return self.memory_end_mb - self.memory_start_mb


class PerformanceCollector:
    """パフォーマンス情報収集クラス"""

    def __init__(self):
        self.process = psutil.Process()
        self._startup_time = time.perf_counter()

    def collect_metrics(self) -> PerformanceMetrics:
        """現在のパフォーマンス指標を収集"""
        try:
            return PerformanceMetrics(
                cpu_percent=self.process.cpu_percent(),
                memory_mb=self.process.memory_info().rss / (1024 * 1024),
                thread_count=self.process.num_threads(),
            )
        except psutil.Error:
            return PerformanceMetrics()

    def get_uptime(self) -> float:
        """計測開始からの経過秒数"""
        return time.perf_counter() - self._startup_time


class PerformanceMonitor:
    """段階計測クラス"""

    def __init__(self, collector: Optional[PerformanceCollector] = None):
        self.collector = collector or PerformanceCollector()
        self._stages: List[StageRecord] = []
        self._lock = threading.Lock()

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """with ブロックの実行時間と RSS の変化を記録"""
        start_memory = self.collector.collect_metrics().memory_mb
        start = time.perf_counter()
        success = False
        try:
            yield
            success = True
        finally:
            record = StageRecord(
                name=name,
                elapsed_seconds=time.perf_counter() - start,
                memory_start_mb=start_memory,
                memory_end_mb=self.collector.collect_metrics().memory_mb,
                success=success,
            )
            with self._lock:
                self._stages.append(record)
            logger.info(f"[{name}] {record.elapsed_seconds:.2f}s, RSS {record.memory_end_mb:.1f}MB "
                        f"({record.memory_delta_mb:+.1f}MB)" + ("" if success else " (失敗)"))

    def get_stages(self) -> List[StageRecord]:
        with self._lock:
            return list(self._stages)

    def clear_history(self) -> None:
        with self._lock:
            self._stages.clear()


class PerformanceReporter:
    """パフォーマンスレポート生成クラス"""

    def __init__(self, monitor: PerformanceMonitor):
        self.monitor = monitor

    def generate_summary_report(self) -> Dict[str, Any]:
        """段階ごとの集計"""
        stages = self.monitor.get_stages()
        if not stages:
            return {"error": "計測データがありません"}

        current = self.monitor.collector.collect_metrics()
        return {
            "timestamp": datetime.now(),
            "stages": [
                {"name": s.name, "elapsed_seconds": s.elapsed_seconds,
                 "memory_delta_mb": s.memory_delta_mb, "success": s.success}
                for s in stages
            ],
            "total_seconds": sum(s.elapsed_seconds for s in stages),
            "peak_memory_mb": max([s.memory_end_mb for s in stages] + [current.memory_mb]),
            "uptime_seconds": self.monitor.collector.get_uptime(),
        }

    def log_summary(self) -> None:
        report = self.generate_summary_report()
        if "error" in report:
            return
        logger.info(f"合計 {report['total_seconds']:.2f}s, ピーク RSS {report['peak_memory_mb']:.1f}MB")
