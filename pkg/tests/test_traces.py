import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from aeodelab.traces import Trace, TraceFormatError, compare_traces, svg_plot


def _trace(vals, scale=1.0):
    t = Trace(meta={"kind": "demo"})
    for s, v in vals:
        t.append({"s": s, "pmse": v * scale, "extra": 2 * v})
    return t


def test_csv_round_trip(tmp_path):
    t = _trace([(0.0, 1.0), (0.5, 0.75), (1.0, 1 / 3)])
    path = tmp_path / "a.csv"
    text = t.to_csv(path)
    assert text.startswith("# schema=1 kind=demo\n")
    assert text.splitlines()[1] == "s,pmse,extra"
    back = Trace.from_csv(path)
    assert back.meta == {"kind": "demo"}
    assert back.columns == t.columns
    assert np.array_equal(back.column("pmse"), t.column("pmse"))


def test_csv_errors(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("s,pmse\n0,1\n")
    with pytest.raises(TraceFormatError, match="schema"):
        Trace.from_csv(p)
    p.write_text("# schema=2\ns,pmse\n0,1\n")
    with pytest.raises(TraceFormatError, match="unsupported"):
        Trace.from_csv(p)
    p.write_text("# schema=1\ns,pmse\n0,1,2\n")
    with pytest.raises(TraceFormatError, match="row 0"):
        Trace.from_csv(p)


def test_missing_entries_are_nan():
    t = Trace()
    t.append({"s": 0.0, "a": 1.0})
    t.append({"s": 1.0, "b": 2.0})
    assert t.columns == ["s", "a", "b"]
    assert math.isnan(t.column("b")[0])


def test_compare_with_itself_is_zero():
    t = _trace([(0.1, 1.0), (1.0, 0.5), (10.0, 0.2)])
    s, dev = compare_traces(t, t)
    assert np.array_equal(dev, np.zeros(3))


def test_compare_interpolates_in_log_time():
    a = _trace([(1.0, 1.0), (10.0, 1.0), (100.0, 1.0)])
    b = Trace()
    b.append({"s": 1.0, "pmse": 1.0})
    b.append({"s": 100.0, "pmse": 2.0})
    s, dev = compare_traces(a, b)
    assert dev == pytest.approx([0.0, 0.5, 1.0])


def test_compare_other_column_and_window():
    a = _trace([(0.5, 1.0), (1.0, 2.0), (2.0, 4.0)])
    s, dev = compare_traces(a, a, "pmse", s_min=1.0, column_b="extra")
    assert np.array_equal(s, [1.0, 2.0])
    assert dev == pytest.approx([1.0, 1.0])


def test_svg_is_well_formed():
    x = np.logspace(-1, 2, 20)
    svg = svg_plot([("a", x, 1 / x), ("b", x, np.full_like(x, 0.5))], title="t", hlines=[("pca", 0.3)])
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert svg.count("<polyline") == 2
    assert "pca" in svg


def test_svg_handles_empty_and_nonpositive():
    svg = svg_plot([("neg", np.array([0.0, 1.0]), np.array([-1.0, 0.0]))])
    ET.fromstring(svg)
    svg = svg_plot([], logx=False, logy=False)
    ET.fromstring(svg)
