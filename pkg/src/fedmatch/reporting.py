"""Run summaries, the grid comparison table, sweep CSV series and figures."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .evaluation import MetricsReport, summary_table


@dataclass
class RowResult:
    name: str
    axis: str | None
    value: object
    report: MetricsReport | None = None
    error: str | None = None
    out_dir: str | None = None

    @property
    def ok(self) -> bool:
        return self.report is not None


def run_summary(name: str, report: MetricsReport, counts: dict[str, int], truncation: dict[str, int]) -> str:
    lines = [f"run: {name}"]
    lines += [f"{k}: {v}" for k, v in counts.items()]
    lines += [f"{k}: {v}" for k, v in truncation.items()]
    lines.append("")
    lines.append(summary_table([(name, report)]))
    return "\n".join(lines)


def combined_table(rows: Sequence[RowResult]) -> str:
    """Successful rows sorted by overall MAP (best first, ties by name);
    failed rows listed after the table."""
    good = sorted((r for r in rows if r.ok), key=lambda r: (-r.report.overall[0], r.name))
    text = summary_table([(r.name, r.report) for r in good]) if good else "(no successful rows)\n"
    failed = [r for r in rows if not r.ok]
    if failed:
        text += "\nfailed rows:\n" + "".join(f"  {r.name}: {r.error}\n" for r in failed)
    return text


def sweep_csv(rows: Sequence[RowResult], axis: str) -> str:
    """Metric-vs-value series for one swept axis, in row order."""
    picked = [r for r in rows if r.ok and r.axis == axis]
    participants = list(picked[0].report.participants) if picked else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "row", "overall_map", "overall_mrr"] + [f"{p}_map" for p in participants])
    for r in picked:
        o_map, o_mrr = r.report.overall
        w.writerow(
            [axis, r.value, r.name, repr(o_map), repr(o_mrr)]
            + [repr(r.report.participants[p].map) for p in participants]
        )
    return buf.getvalue()


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _numeric(values) -> bool:
    try:
        [float(v) for v in values]
    except (TypeError, ValueError):
        return False
    return True


def render_sweep(csv_path: str | Path, png_path: str | Path) -> Path:
    """Overall MAP (and per-participant MAP) against the swept value."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_sweep_csv(csv_path)
    png_path = Path(png_path)
    if not rows:
        raise ValueError(f"{csv_path}: empty sweep")
    axis = rows[0]["axis"]
    values = [r["value"] for r in rows]
    participants = [k[: -len("_map")] for k in rows[0] if k.endswith("_map") and k != "overall_map"]
    fig, ax = plt.subplots(figsize=(6, 4))
    if _numeric(values):
        xs = [float(v) for v in values]
        order = sorted(range(len(xs)), key=lambda i: xs[i])
        xs = [xs[i] for i in order]
        for p in participants:
            ax.plot(xs, [float(rows[i][f"{p}_map"]) for i in order], marker=".", alpha=0.5, label=p)
        ax.plot(xs, [float(rows[i]["overall_map"]) for i in order], marker="o", color="black", lw=2, label="overall")
        ax.set_xlabel(axis)
    else:
        pos = range(len(values))
        ax.bar(pos, [float(r["overall_map"]) for r in rows], color="0.6")
        ax.set_xticks(list(pos))
        ax.set_xticklabels(values, rotation=30, ha="right")
    ax.set_ylabel("MAP")
    ax.set_title(f"MAP vs {axis}")
    if _numeric(values):
        ax.legend(fontsize=7)
    fig.tight_layout()
    png_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(png_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return png_path


def write_grid_outputs(out_dir: str | Path, rows: Sequence[RowResult], plots: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    table = out / "comparison.txt"
    table.write_text(combined_table(rows), encoding="utf-8")
    written["comparison"] = table
    results = {
        r.name: {
            "axis": r.axis,
            "value": r.value,
            "ok": r.ok,
            "error": r.error,
            "metrics": r.report.to_dict() if r.ok else None,
        }
        for r in rows
    }
    (out / "grid.json").write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    written["grid"] = out / "grid.json"
    axes = sorted({r.axis for r in rows if r.axis})
    for axis in axes:
        path = out / "sweeps" / f"{axis}.csv"
        path.parent.mkdir(exist_ok=True)
        text = sweep_csv(rows, axis)
        path.write_text(text, encoding="utf-8")
        written[f"sweep:{axis}"] = path
        if plots and text.count("\n") > 1:
            written[f"figure:{axis}"] = render_sweep(path, path.with_suffix(".png"))
    return written
