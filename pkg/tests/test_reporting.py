import csv

import pytest

from fedmatch.evaluation import MetricsReport, ParticipantMetrics
from fedmatch.reporting import RowResult, combined_table, read_sweep_csv, render_sweep, sweep_csv, write_grid_outputs


def _report(a, b):
    return MetricsReport({"p": ParticipantMetrics(a, a, 1), "q": ParticipantMetrics(b, b, 1)})


ROWS = [
    RowResult("r-0.5", "ratio", 0.5, _report(0.5, 0.7)),
    RowResult("r-1.0", "ratio", 1.0, _report(0.8, 0.9)),
    RowResult("r-0.2", "ratio", 0.2, _report(0.2, 0.4)),
    RowResult("broken", "ratio", 0.9, None, "ValueError: nope"),
    RowResult("mode-a", "mode", "a", _report(0.6, 0.6)),
]


def test_combined_table_sorted_with_failures_listed():
    text = combined_table(ROWS)
    order = [l.split("|")[0].strip() for l in text.splitlines()[3:] if "|" in l]
    assert order == ["r-1.0", "mode-a", "r-0.5", "r-0.2"]
    assert "broken: ValueError: nope" in text


def test_sweep_csv_columns_and_values(tmp_path):
    text = sweep_csv(ROWS, "ratio")
    rows = list(csv.DictReader(text.splitlines()))
    assert list(rows[0]) == ["axis", "value", "row", "overall_map", "overall_mrr", "p_map", "q_map"]
    assert [r["row"] for r in rows] == ["r-0.5", "r-1.0", "r-0.2"]
    assert float(rows[0]["overall_map"]) == pytest.approx(0.6)
    path = tmp_path / "s.csv"
    path.write_text(text)
    assert read_sweep_csv(path) == rows


def test_render_numeric_and_categorical(tmp_path):
    out = write_grid_outputs(tmp_path, ROWS)
    assert out["figure:ratio"].read_bytes()[:4] == b"\x89PNG"
    assert out["figure:mode"].exists()
    assert (tmp_path / "grid.json").exists() and (tmp_path / "comparison.txt").exists()
    empty = tmp_path / "e.csv"
    empty.write_text("axis,value,row,overall_map,overall_mrr\n")
    with pytest.raises(ValueError):
        render_sweep(empty, tmp_path / "e.png")


def test_no_plots_flag(tmp_path):
    out = write_grid_outputs(tmp_path, ROWS, plots=False)
    assert not any(k.startswith("figure:") for k in out)
    assert (tmp_path / "sweeps" / "ratio.csv").exists()
