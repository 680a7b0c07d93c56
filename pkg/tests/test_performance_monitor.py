"""
パフォーマンス監視 テストケース
"""
import pytest

from src.performance_monitor import PerformanceCollector, PerformanceMonitor, PerformanceReporter


class TestPerformanceMonitor:
    """段階計測"""

    def setup_method(self):
        self.monitor = PerformanceMonitor()

    def test_collect_metrics(self):
        metrics = PerformanceCollector().collect_metrics()
        assert metrics.memory_mb > 0
        assert metrics.thread_count >= 1

    def test_stage_records_success(self):
        with self.monitor.stage("load"):
            sum(range(1000))
        stages = self.monitor.get_stages()
        assert [s.name for s in stages] == ["load"]
        assert stages[0].success
        assert stages[0].elapsed_seconds >= 0

    def test_stage_records_failure(self):
        with pytest.raises(ValueError):
            with self.monitor.stage("train"):
                raise ValueError("boom")
        assert self.monitor.get_stages()[0].success is False

    def test_summary_report(self):
        reporter = PerformanceReporter(self.monitor)
        assert "error" in reporter.generate_summary_report()
        with self.monitor.stage("a"):
            pass
        with self.monitor.stage("b"):
            pass
        report = reporter.generate_summary_report()
        assert [s["name"] for s in report["stages"]] == ["a", "b"]
        assert report["peak_memory_mb"] > 0
        reporter.log_summary()

    def test_clear_history(self):
        with self.monitor.stage("a"):
            pass
        self.monitor.clear_history()
        assert self.monitor.get_stages() == []
