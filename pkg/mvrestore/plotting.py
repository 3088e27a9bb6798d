# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

"""SVG plots and Markdown tables built only from loss.csv and report.json files."""

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import csv
import json
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import matplotlib
import numpy as np
from jinja2 import Environment, StrictUndefined
from matplotlib.figure import Figure

from .exceptions import ContractError
from .metrics import MetricReport

_jinja_env = Environment(undefined=StrictUndefined, trim_blocks=True, lstrip_blocks=True)

# (metric key, column title, display scale); VConsis is already x100 in reports
TABLE_COLUMNS: List[Tuple[str, str, float]] = [
    ("psnr", "PSNR", 1.0),
    ("ssim", "SSIM", 1.0),
    ("vconsis", "VConsis", 1.0),
    ("n_correspondences", "Matches", 1.0),
    ("absrel", "AbsRel", 100.0),
    ("delta1", "δ1", 1.0),
    ("gconsis", "GConsis", 1.0),
]

METRIC_TABLE_TEMPLATE = """\
| Run | Task | Views |{% for title in titles %} {{ title }} |{% endfor %}

|---|---|---|{% for title in titles %}---|{% endfor %}

{% for row in rows %}
| {{ row.label }} | {{ row.task }} | {{ row.views }} |{% for cell in row.cells %} {{ cell }} |{% endfor %}

{% endfor %}
"""

# no timestamps and a fixed id salt, so equal inputs give byte-identical SVG files
_SVG_METADATA = {"Date": None, "Creator": None}
_SVG_RC = {"svg.hashsalt": "mvrestore"}

PathLike = Union[str, Path]


def _save_svg(figure: Figure, out_svg: PathLike) -> None:
    with matplotlib.rc_context(_SVG_RC):
        figure.savefig(out_svg, format="svg", metadata=_SVG_METADATA)


def read_loss_csv(path: PathLike) -> Tuple[List[int], List[float]]:
    steps: List[int] = []
    losses: List[float] = []
    with open(path, newline="") as handle:
        for row in csv.DictReader(handle):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    if not steps:
        raise ContractError(f"Loss file '{path}' has no rows")
    return steps, losses


def read_report(path: PathLike) -> Dict[str, Any]:
    """A report.json with its aggregates recomputed from the stored entries."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ContractError(f"Report '{path}' is not JSON: {e}") from e
    return MetricReport.from_dict(data).to_dict()


def moving_average(values: Sequence[float], window: int) -> List[float]:
    """Trailing mean over up to `window` previous values."""
    cumulative = np.cumsum(np.concatenate([[0.0], np.asarray(values, dtype=float)]))
    out = []
    for end in range(1, len(values) + 1):
        start = max(0, end - window)
        out.append(float((cumulative[end] - cumulative[start]) / (end - start)))
    return out


def plot_loss_curve(loss_csv: PathLike, out_svg: PathLike, window: int = 50) -> Path:
    steps, losses = read_loss_csv(loss_csv)
    figure = Figure(figsize=(6, 4))
    ax = figure.add_subplot()
    ax.plot(steps, losses, color="0.75", linewidth=0.8, label="loss")
    ax.plot(steps, moving_average(losses, window), color="C0", label=f"mean of {window}")
    if min(losses) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("noise-prediction MSE")
    ax.legend()
    figure.tight_layout()
    _save_svg(figure, out_svg)
    return Path(out_svg)


def _view_count(report: Dict[str, Any]) -> int:
    return int(report.get("counts", {}).get("views", 0))


def plot_metric_vs_views(
    reports: Sequence[Dict[str, Any]], metric: str, out_svg: PathLike
) -> Path:
    """One bar per report, ordered by number of views in the evaluated set."""
    rows = sorted(
        (
            (_view_count(report), report["aggregates"][metric])
            for report in reports
            if metric in report.get("aggregates", {})
        ),
        key=lambda item: item[0],
    )
    if not rows:
        raise ContractError(f"No report contains metric '{metric}'")
    figure = Figure(figsize=(6, 4))
    ax = figure.add_subplot()
    labels = [f"{views} view{'s' if views != 1 else ''}" for views, _ in rows]
    ax.bar(range(len(rows)), [value for _, value in rows], color="C0")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels)
    ax.set_ylabel(metric)
    figure.tight_layout()
    _save_svg(figure, out_svg)
    return Path(out_svg)


def _format(value: float) -> str:
    return f"{value:.4g}" if abs(value) < 1 else f"{value:.2f}"


def render_metric_table(
    reports: Sequence[Dict[str, Any]], labels: Sequence[str]
) -> str:
    """Markdown table of report aggregates; AbsRel shown x100."""
    present = [
        column
        for column in TABLE_COLUMNS
        if any(column[0] in report.get("aggregates", {}) for report in reports)
    ]
    rows = []
    for label, report in zip(labels, reports):
        aggregates = report.get("aggregates", {})
        rows.append(
            {
                "label": label,
                "task": report.get("task", "?"),
                "views": _view_count(report),
                "cells": [
                    _format(scale * aggregates[key]) if key in aggregates else "n/a"
                    for key, _, scale in present
                ],
            }
        )
    return _jinja_env.from_string(METRIC_TABLE_TEMPLATE).render(
        titles=[title for _, title, _ in present], rows=rows
    )
