"""Reporting output: CSV contents and figure files written to disk."""

import csv
import os

from pocr import report as rp


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestWriteCsv:
    def test_round_trips_rows(self, tmp_path):
        rows = [{"a": 1, "b": 2.5}, {"a": 3, "b": 4.0}]
        path = str(tmp_path / "r.csv")
        rp.write_csv(path, rows)
        back = _read_csv(path)
        assert [r["a"] for r in back] == ["1", "3"]
        assert [r["b"] for r in back] == ["2.5", "4.0"]

    def test_fieldnames_union_in_first_seen_order(self, tmp_path):
        rows = [{"x": 1}, {"x": 2, "y": 3}]
        path = str(tmp_path / "r.csv")
        rp.write_csv(path, rows)
        with open(path) as fh:
            header = fh.readline().strip()
        assert header == "x,y"
        assert _read_csv(path)[0]["y"] == ""

    def test_explicit_fieldnames(self, tmp_path):
        path = str(tmp_path / "r.csv")
        rp.write_csv(path, [{"b": 1, "a": 2}], fieldnames=["a", "b"])
        with open(path) as fh:
            assert fh.readline().strip() == "a,b"


class TestTrainingReport:
    def test_writes_csv_loss_png_and_val_curves(self, tmp_path):
        history = [{"step": 0, "loss": 2.0},
                   {"step": 1, "loss": 1.5, "val_accuracy": 0.2},
                   {"step": 2, "loss": 1.0, "val_accuracy": 0.5}]
        paths = rp.training_report(history, str(tmp_path), stem="run")
        names = sorted(os.path.basename(p) for p in paths)
        assert names == ["run.csv", "run_accuracy.png", "run_loss.png"]
        for p in paths:
            assert os.path.getsize(p) > 0
        pngs = [p for p in paths if p.endswith(".png")]
        for p in pngs:
            with open(p, "rb") as fh:
                assert fh.read(8) == b"\x89PNG\r\n\x1a\n"

    def test_empty_history_writes_only_csv(self, tmp_path):
        paths = rp.training_report([], str(tmp_path))
        assert len(paths) == 1
        assert paths[0].endswith(".csv")

    def test_creates_out_dir(self, tmp_path):
        out = str(tmp_path / "nested" / "dir")
        paths = rp.training_report([{"step": 0, "loss": 1.0}], out)
        assert all(os.path.exists(p) for p in paths)


class TestMetricsReport:
    def test_writes_csv_and_bar_chart(self, tmp_path):
        rows = [{"name": "precision", "value": 0.8},
                {"name": "recall", "value": 0.7}]
        paths = rp.metrics_report(rows, str(tmp_path), stem="eval")
        names = sorted(os.path.basename(p) for p in paths)
        assert names == ["eval.csv", "eval.png"]
        back = _read_csv([p for p in paths if p.endswith(".csv")][0])
        assert back[0]["name"] == "precision"
        assert float(back[1]["value"]) == 0.7
