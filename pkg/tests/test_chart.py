"""Hand-rolled SVG chart rendering."""

import xml.etree.ElementTree as ET

import pytest

from faceattr.chart import history_chart, line_chart
from faceattr.errors import ContractError

SVG_NS = "{http://www.w3.org/2000/svg}"


def _polylines(svg_text):
    root = ET.fromstring(svg_text)
    return root.findall(f".//{SVG_NS}polyline")


def test_line_chart_structure():
    svg = line_chart([("loss", [0, 1, 2, 3], [4.0, 2.0, 1.0, 0.5])],
                     title="run", xlabel="epoch", ylabel="loss")
    lines = _polylines(svg)
    assert len(lines) == 1
    points = lines[0].attrib["points"].split()
    assert len(points) == 4
    assert all("," in p for p in points)
    assert "run" in svg and "epoch" in svg and "loss" in svg


def test_line_chart_is_deterministic():
    series = [("a", [0, 1, 2], [0.3, 0.2, 0.1]), ("b", [0, 1, 2], [0.5, 0.4, 0.2])]
    assert line_chart(series) == line_chart(series)


def test_line_chart_escapes_markup():
    svg = line_chart([("<b>", [0, 1], [1.0, 2.0])], title="a < b & c")
    assert "<b>" not in svg.replace("<body", "")  # no raw tag injection
    assert "&lt;b&gt;" in svg
    assert "a &lt; b &amp; c" in svg
    ET.fromstring(svg)  # still well-formed


def test_line_chart_handles_flat_series():
    svg = line_chart([("flat", [0, 1, 2], [1.0, 1.0, 1.0])])
    ET.fromstring(svg)


def test_line_chart_validation():
    with pytest.raises(ContractError):
        line_chart([])
    with pytest.raises(ContractError):
        line_chart([("a", [0, 1], [1.0])])
    with pytest.raises(ContractError):
        line_chart([("a", [], [])])


def test_history_chart_draws_train_and_validation():
    rows = [{"epoch": i, "train_loss": 1.0 / (i + 1), "train_acc": 0.5,
             "val_loss": 1.2 / (i + 1), "val_acc": 0.5} for i in range(5)]
    svg = history_chart(rows)
    lines = _polylines(svg)
    assert len(lines) == 2
    assert all(len(p.attrib["points"].split()) == 5 for p in lines)
    assert "train loss" in svg and "validation loss" in svg
    with pytest.raises(ContractError):
        history_chart([])
