import math
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from helioforge.metrics import EvaluationResult, ScaleDiagnostic
from helioforge.report import (
    HEADER, ResultRow, day_plot_svg, delta_table, emit_report, fmt, fraction_curves_svg, read_results_csv,
    results_table,
)

SVG = "{http://www.w3.org/2000/svg}"


def row(strategy="local", target="site-D", fraction=100, value=12.345678901, scale=None):
    return ResultRow(strategy, "site-S", target, fraction, EvaluationResult(value, value * 0.5, value * 1.5, 10, 5, 5),
                     te_mean=1234.5678, te_std=0.0, scale=scale)


def test_single_row_header(tmp_path):
    emit_report([row()], tmp_path)
    lines = (tmp_path / "results.csv").read_bytes().split(b"\n")
    assert lines[0] == b"strategy,source,target,fraction_pct,rmse,rmse_sunny,rmse_cloudy,te_mean,te_std"
    assert len([x for x in lines if x]) == 2
    assert b"\r" not in (tmp_path / "results.csv").read_bytes()


def test_parse_back_six_significant_digits(tmp_path, rng):
    rows = [row(value=float(v), scale=ScaleDiagnostic(float(v) / 7, float(v), float(v) / 3, 0.9))
            for v in rng.lognormal(3, 2, size=25)]
    emit_report(rows, tmp_path)
    parsed = read_results_csv(tmp_path / "results.csv")
    assert list(parsed[0]) == HEADER + ["scale_factor", "rmse_scaled", "pearson_r"]
    for r, p in zip(rows, parsed):
        for written, value in ((p["rmse"], r.evaluation.rmse_overall), (p["rmse_sunny"], r.evaluation.rmse_sunny),
                               (p["te_mean"], r.te_mean), (p["scale_factor"], r.scale.best_factor)):
            assert abs(float(written) - float(fmt(value))) <= 1e-12 * abs(float(fmt(value)))
            assert abs(float(written) - value) <= 5e-6 * abs(value)
        assert p["fraction_pct"] == "100"


def test_scale_columns_blank_for_rows_without_diagnostic():
    table = results_table([row(), row("offsite", scale=ScaleDiagnostic(2.0, 5.0, 1.0, 0.8))])
    assert table[1][-3:] == ["", "", ""] and table[2][-3:] == ["2", "1", "0.8"]


def test_nan_te_written(tmp_path):
    r = row()
    r.te_mean = math.nan
    emit_report([r], tmp_path)
    assert read_results_csv(tmp_path / "results.csv")[0]["te_mean"] == "nan"


def test_svgs_well_formed(tmp_path, rng):
    rows = [row("local", fraction=f, value=100 - f / 2) for f in (1, 5, 10)]
    rows += [row(s, fraction=f, value=90 - f / 3) for s in ("WS", "FConv") for f in (1, 5, 10)]
    minutes = np.arange(60)
    written = emit_report(rows, tmp_path, [("sunny", minutes, rng.normal(size=60), rng.normal(size=60))], units="W/m²")
    svgs = [p for p in written if p.suffix == ".svg"]
    assert {p.name for p in svgs} == {"day_sunny.svg", "delta_rmse_vs_fraction.svg"}
    for p in svgs:
        root = ET.parse(p).getroot()
        assert root.tag == SVG + "svg" and root.get("version") == "1.1"
        assert root.findall(f".//{SVG}polyline")
    curves = ET.fromstring(fraction_curves_svg(rows)).findall(f".//{SVG}polyline")
    assert len(curves) == 2
    assert all(len(c.get("points").split()) == 3 for c in curves)
    assert "summary.md" in {p.name for p in written}


def test_escapes_titles():
    ET.fromstring(day_plot_svg([0, 1], [1.0, 2.0], [1.0, 2.0], "a<b & c"))


def test_delta_table():
    d = delta_table([row(value=100.0, fraction=10), row("WS", value=90.0, fraction=10), row("FConv", value=40.0,
                                                                                           fraction=20)])
    assert d == [("WS", "site-S", "site-D", 10.0, pytest.approx(-10.0))]


def test_unwritable_and_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ValueError):
        emit_report([row()], blocker / "sub")
    if os.geteuid() != 0:
        locked = tmp_path / "locked"
        locked.mkdir(mode=0o500)
        with pytest.raises(ValueError):
            emit_report([row()], locked)
