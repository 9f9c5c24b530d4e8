# -*- coding: utf-8 -*-
import numpy as np
import pandas as pd
import plotly.graph_objects as go
import pytest

from UIPresentation.graficador import Graficador


@pytest.fixture
def tabla():
    return pd.DataFrame(
        {"base": [0.30, 0.28, 0.31, 0.29], "adaptado": [0.25, np.nan, 0.22, 0.21]},
        index=[0, 1, 2, 3],
    )


def test_one_polyline_per_series(tabla):
    svg = Graficador().gen_chart(tabla)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<polyline") == 2
    assert ">base<" in svg and ">adaptado<" in svg


def test_nan_points_are_skipped(tabla):
    svg = Graficador().gen_chart(tabla)
    lineas = [l for l in svg.splitlines() if l.startswith("<polyline")]
    assert len(lineas[0].split('points="')[1].split()) == 4
    assert len(lineas[1].split('points="')[1].split()) == 3


def test_labels_are_escaped():
    svg = Graficador().gen_chart(pd.DataFrame({"a<b": [0.1, 0.2]}), titulo="R&D")
    assert "a&lt;b" in svg and "R&amp;D" in svg


def test_invalid_inputs():
    with pytest.raises(ValueError):
        Graficador().gen_chart(pd.DataFrame())
    with pytest.raises(ValueError):
        Graficador().gen_chart(pd.DataFrame({"a": [np.nan, np.nan]}))
    with pytest.raises(ValueError):
        Graficador(ancho=100, margen=56)


def test_save_chart_and_timeline(tmp_path, tabla):
    g = Graficador()
    ruta = g.save_chart(tabla, tmp_path / "chart.svg")
    assert ruta.read_text(encoding="utf-8") == g.gen_chart(tabla)
    fig = g.gen_timeline(tabla)
    assert isinstance(fig, go.Figure)
    assert [t.name for t in fig.data] == ["base", "adaptado"]
    html = g.save_timeline(tabla, tmp_path / "chart.html")
    assert "plotly" in html.read_text(encoding="utf-8").lower()
