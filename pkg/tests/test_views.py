import io
import json

import pytest

from model.errors import IoFailure
from model.trainer import EpochRecord
from view.report_view import ReportView, format_table, format_text
from view.status_bar import TrainingStatusBar


class TestReportView:
    def test_json_is_sorted_and_parseable(self):
        stream = io.StringIO()
        ReportView(as_json=True, stream=stream).show({"b": 1, "a": [1.5]})
        assert stream.getvalue().index('"a"') < stream.getvalue().index('"b"')
        assert json.loads(stream.getvalue()) == {"a": [1.5], "b": 1}

    def test_text_renders_report_table(self):
        text = format_text({"command": "eval", "report": {"i2t_r1": 50.0, "rsum": 300.0}})
        assert "command: eval" in text
        assert "i2t_r1" in text and "50.00" in text
        assert "-" in text.splitlines()[-1]

    def test_rows_become_columns(self):
        text = format_text({"rows": [{"K": 1, "report": {"rsum": 10.0}}, {"K": 2, "report": {"rsum": 12.5}}]})
        header = text.splitlines()[0].split()
        assert header == ["K", "rsum"]

    def test_table_alignment(self):
        lines = format_table([{"x": 1, "flag": True}, {"x": 100, "flag": None}], ["x", "flag"]).splitlines()
        assert len({len(line) for line in lines}) == 1
        assert lines[2].endswith("yes") and lines[3].endswith("-")

    def test_save_always_writes_json(self, tmp_path):
        path = tmp_path / "out" / "r.json"
        ReportView(as_json=False, stream=io.StringIO()).show({"rsum": 1.0}, path)
        assert json.loads(path.read_text()) == {"rsum": 1.0}

    def test_save_failure(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IoFailure):
            ReportView(stream=io.StringIO()).save({}, blocker / "r.json")

    def test_error_line(self):
        stream = io.StringIO()
        ReportView().show_error("BadLambda", "lambda must lie in [0, 1]", stream)
        assert stream.getvalue() == "BadLambda: lambda must lie in [0, 1]\n"


class TestTrainingStatusBar:
    def test_line_per_epoch(self):
        stream = io.StringIO()
        bar = TrainingStatusBar(stream)
        bar.update_metrics(EpochRecord(1, 0.5, 0.01), 10)
        bar.update_metrics(EpochRecord(2, 0.25, 0.01), 10)
        lines = stream.getvalue().splitlines()
        assert lines[0].startswith("epoch  1/10")
        assert "loss 0.2500" in lines[1]

    def test_marks_drop_below_best_rsum(self):
        bar = TrainingStatusBar(io.StringIO())
        bar.update_metrics(EpochRecord(1, 0.5, 0.01, val_rsum=0.0), 3)
        assert "below best" not in bar.format_metrics(EpochRecord(2, 0.4, 0.01, val_rsum=0.0), 3)
        bar.update_metrics(EpochRecord(2, 0.4, 0.01, val_rsum=120.0), 3)
        assert "(below best)" in bar.format_metrics(EpochRecord(3, 0.3, 0.01, val_rsum=100.0), 3)

    def test_disabled_writes_nothing(self):
        stream = io.StringIO()
        TrainingStatusBar(stream, enabled=False).update_metrics(EpochRecord(1, 0.5, 0.01), 1)
        assert stream.getvalue() == ""
