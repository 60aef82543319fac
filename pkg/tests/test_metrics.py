"""JSON-lines metrics sink and reader."""

import json

import pytest

from ressl.metrics import MetricsLogger, StepMetrics, log_metrics, read_metrics


def _record(step):
    return StepMetrics(step=step, epoch=0, loss_total=1.0, loss_rel=0.9, loss_nce=1.2, alpha=1.0,
                       lr=0.06, m=0.99, queue_fill=8 * (step + 1), embedding_std=0.05, grad_norm=1.5)


class TestSink:
    def test_one_line_per_record_with_schema(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        with MetricsLogger(path) as sink:
            for step in range(3):
                log_metrics(_record(step), sink)
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        for line in lines:
            record = json.loads(line)
            assert {"step", "loss_total", "loss_rel", "loss_nce", "alpha", "lr", "m"} <= set(record)

    def test_steps_must_increase(self, tmp_path):
        with MetricsLogger(tmp_path / "metrics.jsonl") as sink:
            log_metrics(_record(5), sink)
            with pytest.raises(ValueError):
                log_metrics(_record(5), sink)

    def test_append_only_across_segments(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        with MetricsLogger(path) as sink:
            log_metrics(_record(0), sink)
        with MetricsLogger(path) as sink:
            log_metrics(_record(1), sink)
        assert [r["step"] for r in read_metrics(path)] == [0, 1]

    def test_unwritable_sink_fails_at_open(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            MetricsLogger(blocker / "metrics.jsonl")


class TestReader:
    def test_torn_final_line_skipped(self, tmp_path, caplog):
        path = tmp_path / "metrics.jsonl"
        with MetricsLogger(path) as sink:
            log_metrics(_record(0), sink)
            log_metrics(_record(1), sink)
        with open(path, "a") as f:
            f.write('{"step": 2, "loss_to')
        assert [r["step"] for r in read_metrics(path)] == [0, 1]
        assert "torn" in caplog.text

    def test_corrupt_middle_line_raises(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        path.write_text('{"step": 0}\nnot json\n{"step": 2}\n')
        with pytest.raises(json.JSONDecodeError):
            read_metrics(path)

    def test_since_step_filter(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        with MetricsLogger(path) as sink:
            for step in range(5):
                log_metrics(_record(step), sink)
        assert [r["step"] for r in read_metrics(path, since_step=3)] == [3, 4]

    def test_missing_file_is_empty(self, tmp_path):
        assert read_metrics(tmp_path / "none.jsonl") == []


class TestStepMetrics:
    def test_finiteness(self):
        assert _record(0).is_finite()
        bad = _record(0)
        bad.loss_total = float("nan")
        assert not bad.is_finite()
