import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vascreg.errors import EmptyInput, PointCountMismatch, TooFewPoints
from vascreg.geometry import CenterlineBranch
from vascreg.metrics import (METRIC_NAMES, REFERENCE_ROW, aggregate_reports, compute_metrics,
                             metrics_csv)



@st.composite
def curve(draw, n=12):
    # random walk with bounded-away-from-zero steps, so no triple is degenerate
    ang = draw(arrays(float, n - 1, elements=st.floats(0, 2 * np.pi)))
    step = draw(arrays(float, n - 1, elements=st.floats(0.2, 5.0)))
    start = draw(arrays(float, 2, elements=st.floats(-20, 20)))
    d = step[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts = np.vstack([start, start + np.cumsum(d, axis=0)])
    assume(np.all(np.linalg.norm(pts[2:] - pts[:-2], axis=1) > 1e-3))
    return pts


def test_identical_curves_score_zero():
    g = np.cumsum(np.ones((10, 2)), axis=0) + np.sin(np.arange(10))[:, None]
    r = compute_metrics(g, g)
    assert all(v == 0.0 for v in r.as_dict().values())


def test_constant_offset_oracle():
    g = np.stack([np.arange(10.0), np.sin(np.arange(10.0))], axis=1)
    r = compute_metrics(g + [3.0, 4.0], g)
    assert r.mse == pytest.approx(25.0) and r.rmse == pytest.approx(5.0)
    assert r.mae == pytest.approx(5.0) and r.max_err == pytest.approx(5.0)
    assert r.len_err == pytest.approx(0.0, abs=1e-12)
    assert r.curv_err == pytest.approx(0.0, abs=1e-12)


def test_single_point_error():
    g = np.stack([np.arange(5.0), np.zeros(5)], axis=1)
    p = g.copy()
    p[2, 1] = 2.0
    r = compute_metrics(p, g)
    assert r.mse == pytest.approx(4.0 / 5) and r.mae == pytest.approx(2.0 / 5)
    assert r.max_err == pytest.approx(2.0)
    assert r.len_err == pytest.approx(2 * np.sqrt(5) - 2)


def test_accepts_branches():
    g = CenterlineBranch(np.stack([np.arange(5.0), np.arange(5.0) ** 1.5], axis=1))
    assert compute_metrics(g, g).mse == 0.0


@given(curve(), curve())
@settings(max_examples=40)
def test_metric_relations(p, g):
    r = compute_metrics(p, g)
    assert r.mae <= r.rmse + 1e-12 <= r.max_err + 2e-12
    assert r.rmse == pytest.approx(np.sqrt(r.mse))
    assert r.len_err >= 0


@given(curve(), curve(), st.floats(0, 2 * np.pi), arrays(float, 2, elements=st.floats(-5, 5)))
@settings(max_examples=40)
def test_metrics_are_rigid_invariant(p, g, theta, shift):
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    a = compute_metrics(p, g)
    b = compute_metrics(p @ R.T + shift, g @ R.T + shift)
    for k in ("mse", "mae", "max_err", "len_err"):
        assert getattr(b, k) == pytest.approx(getattr(a, k), rel=1e-9, abs=1e-9)


def test_input_validation():
    with pytest.raises(PointCountMismatch):
        compute_metrics(np.zeros((4, 2)), np.zeros((5, 2)))
    with pytest.raises(TooFewPoints):
        compute_metrics(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(EmptyInput):
        aggregate_reports([])


def test_aggregate_is_arithmetic_mean():
    g = np.stack([np.arange(6.0), np.zeros(6)], axis=1)
    rs = [compute_metrics(g + [0, d], g) for d in (1.0, 3.0)]
    s = aggregate_reports(rs)
    assert s.count == 2 and s.mean.mse == pytest.approx(5.0) and s.mean.rmse == pytest.approx(2.0)
    assert s.reference == REFERENCE_ROW


def test_csv_layout():
    g = np.stack([np.arange(6.0), np.zeros(6)], axis=1)
    r = compute_metrics(g + [0, 1], g)
    rows = [{"case_id": 1, "method": "rigid", **r.as_dict()}]
    text = metrics_csv(rows, ["case_id", "method"], ["hello"], {"rigid": aggregate_reports([r])})
    lines = text.splitlines()
    assert lines[0] == "# hello"
    assert lines[1] == ",".join(["case_id", "method", *METRIC_NAMES])
    assert lines[2].startswith("1,rigid,1,1,1,1,0")
    assert lines[3].startswith("summary,rigid,")
    assert lines[4].startswith("reference,clinical,0.63,,0.51")
    assert metrics_csv(rows, ["case_id", "method"]) == metrics_csv(rows, ["case_id", "method"])
