import xml.etree.ElementTree as ET

import numpy as np

from cnninte import interpret as I
from cnninte.report import NS, ReportSpec, render_svg, svg_filename

SVG = "{http://www.w3.org/2000/svg}"


def cells(doc):
    root = ET.fromstring(doc)
    return root, [e for e in root.iter(SVG + "svg") if e.get("class") == "cell"]


def synthetic_trace(depths, verdicts, seed=0):
    rng = np.random.default_rng(seed)
    path = [(k % 3, k + 0.5, bool(k % 2)) for k in range(5)]
    cols = []
    hyps = [h for h in range(10) if h != 4]
    for h, d, v in zip(hyps, depths, verdicts):
        steps = []
        for k in range(d):
            nt, nh = rng.integers(1, 30), (0 if (v == I.SEPARATED and k == d - 1) else rng.integers(1, 30))
            f, thr, left = path[k]
            steps.append(I.TraceStep(k + 1, f, (f, thr, "<=" if left else ">"), nt, nh,
                                     points_true=rng.normal(size=(nt, 2)), points_hypo=rng.normal(size=(nh, 2))))
        cols.append(I.HypothesisColumn(h, steps, v))
    return I.InterpretationTrace(17, 4, 4, (0, 1, 2), path, cols)


def test_all_separated_at_depth_one():
    tr = synthetic_trace([1] * 9, [I.SEPARATED] * 9)
    _, cs = cells(render_svg(tr))
    assert len(cs) == 9
    for c in cs:
        border = c.find(SVG + "rect")
        assert border.get("stroke") == ReportSpec().separated_color
        assert c.get(f"{{{NS}}}verdict") == I.SEPARATED


def test_cell_count_borders_and_viewport():
    depths = [1, 2, 3, 4, 5, 5, 3, 2, 4]
    verdicts = [I.SEPARATED, I.OVERLAPPING, I.SEPARATED, I.SEPARATED, I.OVERLAPPING,
                I.SEPARATED, I.OVERLAPPING, I.SEPARATED, I.SEPARATED]
    tr = synthetic_trace(depths, verdicts, seed=3)
    spec = ReportSpec()
    root, cs = cells(render_svg(tr, spec))
    assert len(cs) == sum(depths)
    per_col = {}
    for c in cs:
        per_col.setdefault(c.get(f"{{{NS}}}hypothesis"), []).append(c)
        w, h = float(c.get("width")), float(c.get("height"))
        for circle in c.iter(SVG + "circle"):
            assert 0 <= float(circle.get("cx")) <= w and 0 <= float(circle.get("cy")) <= h
        groups = [g.get("class") for g in c.findall(SVG + "g")]
        assert groups == sorted(groups, key=["true", "hypo"].index)  # hypothesis drawn over true
    for col, v in zip(tr.columns, verdicts):
        got = per_col[str(col.hypothesis)]
        assert len(got) == len(col.steps)
        colors = [g.find(SVG + "rect").get("stroke") for g in got]
        want = spec.separated_color if v == I.SEPARATED else spec.overlapping_color
        assert colors[-1] == want and all(c == spec.neutral_color for c in colors[:-1])
        assert [g.get(f"{{{NS}}}verdict") for g in got][:-1] == [None] * (len(got) - 1)
    title = next(t for t in root.iter(SVG + "text") if t.get("class") == "title")
    assert "instance 17" in title.text and "true 4" in title.text


def test_deterministic_bytes_and_name():
    tr = synthetic_trace([2] * 9, [I.OVERLAPPING] * 9, seed=5)
    assert render_svg(tr) == render_svg(synthetic_trace([2] * 9, [I.OVERLAPPING] * 9, seed=5))
    assert svg_filename(tr) == "interp_17_4_4.svg"


def test_real_trace_renders(small_run):
    ens, meta_test = small_run["ensemble"], small_run["meta_test"]
    tr = I.trace(ens, meta_test, ens.meta_train, small_run["acts"], 5)
    _, cs = cells(render_svg(tr))
    assert len(cs) == sum(len(c.steps) for c in tr.columns)
    # text round-trip keeps everything the renderer needs
    assert render_svg(I.trace_from_text(I.trace_to_text(tr))) == render_svg(tr)
