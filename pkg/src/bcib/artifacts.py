"""CSV tables and minimal SVG line charts for sweeps and MI curves.

File names are fixed so downstream scripts can rely on them:

==========================  ====================================================
``sweep_beta.csv``          one row per (beta, seed) run
``sweep_beta_points.csv``   one row per beta: mean/sd success, mean final MI
``sweep_beta.svg``          mean success and mean final MI against beta
``sweep_demos.csv``         one row per (demos per task, seed) run
``sweep_demos_points.csv``  aggregated few-shot points
``sweep_demos.svg``         mean success against demos per task
``sweep_<axis>_failures.csv``  only written when some runs failed
``mi_curve.csv``            per-epoch training-critic MI, BC loss, success rate
``mi_curve.svg``            MI estimate (and success rate) against epoch
==========================  ====================================================

An empty result still produces its header-only CSV but no SVG.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .harness import RunResult, SweepResult
from .trainer import TrainReport

RUN_HEADERS = {
    "beta": ["beta", "seed", "success_rate", "final_mi", "selected_epoch"],
    "demos": ["demos", "seed", "success_rate", "final_mi", "selected_epoch"],
}
POINT_HEADER_TAIL = ["mean_success", "sd_success", "mean_final_mi", "n_seeds"]
MI_CURVE_HEADER = ["epoch", "mi_estimate", "bc_loss", "success_rate"]


class ArtifactError(OSError):
    pass


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def _axis_value(axis: str, v: float):
    return int(v) if axis == "demos" else float(v)


def sweep_runs_csv(result: SweepResult) -> str:
    rows = [
        [_axis_value(result.axis, r.value), r.seed, r.success_rate, r.final_mi, r.selected_epoch]
        for r in result.runs
        if r.ok
    ]
    return _csv(RUN_HEADERS[result.axis], rows)


def sweep_points_csv(result: SweepResult) -> str:
    rows = [[_axis_value(result.axis, p.value), p.mean_success, p.sd_success, p.mean_final_mi, len(p.seeds)] for p in result.points]
    return _csv([result.axis] + POINT_HEADER_TAIL, rows)


def parse_sweep_runs_csv(text: str) -> list[RunResult]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        return []
    axis = "beta" if "beta" in rows[0] else "demos"
    return [
        RunResult(
            axis,
            float(r[axis]),
            int(r["seed"]),
            float(r["success_rate"]),
            float(r["final_mi"]) if r["final_mi"] else math.nan,
            selected_epoch=int(r["selected_epoch"]),
        )
        for r in rows
    ]


def mi_curve_csv(report: TrainReport) -> str:
    rows = [[r.epoch, r.mi_estimate, r.bc_loss, r.eval_success_rate] for r in report.records]
    return _csv(MI_CURVE_HEADER, rows)


# ---------------------------------------------------------------------------
# SVG


def line_chart(
    series: dict[str, list[tuple[float, float]]],
    x_label: str,
    y_label: str,
    title: str = "",
    log_x: bool = False,
    width: int = 480,
    height: int = 320,
) -> str:
    """Polyline chart with axes, min/max tick labels and a legend; no external assets."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    pts = [(x, y) for s in series.values() for x, y in s if math.isfinite(y)]
    if not pts:
        raise ValueError("nothing to plot")

    def tx(x: float) -> float:
        return math.log10(x) if log_x else x

    xs = [tx(x) for x, _ in pts]
    ys = [y for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    left, right, top, bottom = 64, 16, 32, 48
    pw, ph = width - left - right, height - top - bottom

    def px(x: float) -> float:
        return left + (tx(x) - x0) / (x1 - x0) * pw

    def py(y: float) -> float:
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle" font-size="12">{escape(x_label)}</text>',
        f'<text x="14" y="{top + ph / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {top + ph / 2})">{escape(y_label)}</text>',
        f'<text x="{left - 4}" y="{top + ph}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{left - 4}" y="{top + 10}" text-anchor="end" font-size="10">{y1:.3g}</text>',
        f'<text x="{left}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{(10**x0 if log_x else x0):.3g}</text>',
        f'<text x="{left + pw}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{(10**x1 if log_x else x1):.3g}</text>',
    ]
    if title:
        out.append(f'<text x="{left + pw / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    for i, (name, data) in enumerate(series.items()):
        color = colors[i % len(colors)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in data if math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for x, y in data:
            if math.isfinite(y):
                out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        out.append(f'<text x="{left + pw - 4}" y="{top + 14 * (i + 1)}" text-anchor="end" font-size="11" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _sweep_svg(result: SweepResult) -> str:
    if result.axis == "beta":
        # beta = 0 sits at the left edge, one decade below the smallest nonzero beta
        nonzero = [p.value for p in result.points if p.value > 0]
        floor = min(nonzero) / 10 if nonzero else 1e-5

        def pos(v: float) -> float:
            return v if v > 0 else floor

        series = {
            "mean success": [(pos(p.value), p.mean_success) for p in result.points],
            "mean final MI / max": _normalised([(pos(p.value), p.mean_final_mi) for p in result.points]),
        }
        return line_chart(series, "beta (log scale; leftmost point is beta = 0)", "value", "Effect of beta", log_x=True)
    series = {"mean success": [(p.value, p.mean_success) for p in result.points]}
    return line_chart(series, "demonstrations per task", "success rate", "Few-shot sweep")


def _normalised(data: list[tuple[float, float]]) -> list[tuple[float, float]]:
    top = max((abs(y) for _, y in data if math.isfinite(y)), default=0.0)
    return [(x, y / top if top else y) for x, y in data]


def emit_sweep(result: SweepResult, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    stem = f"sweep_{result.axis}"
    files = [
        _write(out / f"{stem}.csv", sweep_runs_csv(result)),
        _write(out / f"{stem}_points.csv", sweep_points_csv(result)),
    ]
    if result.failures:
        rows = [[_axis_value(result.axis, r.value), r.seed, r.error] for r in result.failures]
        files.append(_write(out / f"{stem}_failures.csv", _csv([result.axis, "seed", "error"], rows)))
    if result.points:
        files.append(_write(out / f"{stem}.svg", _sweep_svg(result)))
    return files


def emit_mi_curve(report: TrainReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    files = [_write(out / "mi_curve.csv", mi_curve_csv(report))]
    if report.records:
        series = {"MI estimate (nats)": [(r.epoch, r.mi_estimate) for r in report.records]}
        evaluated = [(r.epoch, r.eval_success_rate) for r in report.records if r.eval_success_rate is not None]
        if evaluated:
            series["success rate"] = evaluated
        files.append(_write(out / "mi_curve.svg", line_chart(series, "epoch", "value", "Training MI and success")))
    return files


def emit_artifacts(results: Sequence[SweepResult | TrainReport], out_dir: str | Path) -> list[Path]:
    """Write every artifact for ``results``; returns the paths written."""
    files: list[Path] = []
    for res in results:
        files.extend(emit_sweep(res, out_dir) if isinstance(res, SweepResult) else emit_mi_curve(res, out_dir))
    return files
