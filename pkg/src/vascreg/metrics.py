"""Point-wise and shape metrics between a predicted and a reference 2D branch."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyInput, PointCountMismatch, TooFewPoints
from .geometry import CenterlineBranch, arc_length, polyline_curvature

METRIC_NAMES = ("mse", "rmse", "mae", "max_err", "len_err", "curv_err")

# Clinical-data results reported for the method (MSE, MAE, MaxErr, LenErr, CurvErr).
# Shown next to summaries for context only; the synthetic benchmark is not
# expected to reproduce them.
REFERENCE_ROW = {"mse": 0.63, "mae": 0.51, "max_err": 2.01, "len_err": 1.15, "curv_err": 0.095}


@dataclass(frozen=True)
class MetricReport:
    """Errors of one prediction.

    ``mse`` is in mm^2 and ``rmse`` its square root in mm; ``curv_err`` is in
    1/mm with the half-circumradius curvature convention of
    :func:`vascreg.geometry.menger_curvature`.
    """
    mse: float
    rmse: float
    mae: float
    max_err: float
    len_err: float
    curv_err: float

    def as_dict(self) -> dict:
        return asdict(self)


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, CenterlineBranch) else np.asarray(x, float)


def compute_metrics(pred, gt) -> MetricReport:
    """Compare two point-wise corresponding polylines (branches or (P, 2) arrays)."""
    p, g = _points(pred), _points(gt)
    if p.shape != g.shape:
        raise PointCountMismatch(f"prediction {p.shape} vs reference {g.shape}")
    if len(p) < 3:
        raise TooFewPoints("metrics need at least 3 points")
    d = np.linalg.norm(p - g, axis=1)
    mse = float(np.mean(d ** 2))
    return MetricReport(
        mse=mse,
        rmse=float(np.sqrt(mse)),
        mae=float(np.mean(d)),
        max_err=float(np.max(d)),
        len_err=abs(arc_length(p) - arc_length(g)),
        curv_err=float(np.mean(np.abs(polyline_curvature(p) - polyline_curvature(g)))),
    )


@dataclass(frozen=True)
class Summary:
    mean: MetricReport
    count: int
    reference: dict

    def as_dict(self) -> dict:
        return {"count": self.count, **self.mean.as_dict()}


def aggregate_reports(reports: Sequence[MetricReport]) -> Summary:
    """Arithmetic mean of every metric (so ``rmse`` is the mean per-sample RMSE)."""
    reports = list(reports)
    if not reports:
        raise EmptyInput("no reports to aggregate")
    mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    return Summary(MetricReport(**mean), len(reports), dict(REFERENCE_ROW))


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


def metrics_csv(rows: Iterable[dict], id_columns: Sequence[str], header: Sequence[str] = (),
                summaries: Optional[dict] = None) -> str:
    """Render rows (ids + metric values) as CSV text.

    ``header`` lines are emitted first as ``#`` comments. ``summaries`` maps a
    label (e.g. a method name) to a :class:`Summary`; each becomes a trailing
    row whose first id column reads ``summary``.
    """
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    cols = list(id_columns) + list(METRIC_NAMES)
    w.writerow(cols)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in cols])
    for label, summ in (summaries or {}).items():
        ids = ["summary"] + [label] + [""] * (len(id_columns) - 2)
        w.writerow(ids[:len(id_columns)] + [_fmt(getattr(summ.mean, m)) for m in METRIC_NAMES])
    if summaries:
        ref = ["reference", "clinical"] + [""] * (len(id_columns) - 2)
        w.writerow(ref[:len(id_columns)] + [_fmt(REFERENCE_ROW.get(m, "")) for m in METRIC_NAMES])
    return buf.getvalue()


def write_metrics_csv(path, rows, id_columns, header=(), summaries=None) -> None:
    Path(path).write_text(metrics_csv(rows, id_columns, header, summaries))
