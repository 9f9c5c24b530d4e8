#!/usr/bin/python
# -*- coding: utf-8 -*-

import logging
from pathlib import Path
from typing import List, Optional, Union
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd
import plotly.graph_objects as go

logger = logging.getLogger(__name__)

PALETA = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


class Graficador:
    """Recibe tablas de error por cuadro (índice = cuadro, una columna por serie) y las grafica."""

    def __init__(self, ancho: int = 720, alto: int = 360, margen: int = 56):
        if ancho <= 2 * margen or alto <= 2 * margen:
            raise ValueError("El área del gráfico es demasiado pequeña para el margen.")
        self.ancho = ancho
        self.alto = alto
        self.margen = margen

    def gen_chart(self, datos: pd.DataFrame, titulo: str = "Error absoluto por cuadro", eje_y: str = "abs_rel") -> str:
        """Genera un SVG con ejes, una polilínea por columna y leyenda. Los NaN cortan la serie."""
        if datos.empty:
            raise ValueError("No hay datos para graficar.")
        x = datos.index.to_numpy(dtype=float)
        valores = datos.to_numpy(dtype=float)
        finitos = valores[np.isfinite(valores)]
        if finitos.size == 0:
            raise ValueError("Todas las series son NaN.")
        x0, x1 = float(x.min()), float(x.max())
        y0, y1 = 0.0, float(finitos.max())
        if x1 == x0:
            x1 = x0 + 1.0
        if y1 <= y0:
            y1 = y0 + 1.0

        m = self.margen
        ancho_util, alto_util = self.ancho - 2 * m, self.alto - 2 * m

        def px(v: float) -> float:
            return m + (v - x0) / (x1 - x0) * ancho_util

        def py(v: float) -> float:
            return self.alto - m - (v - y0) / (y1 - y0) * alto_util

        partes: List[str] = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.ancho}" height="{self.alto}" '
            f'viewBox="0 0 {self.ancho} {self.alto}" font-family="sans-serif" font-size="11">',
            f'<rect width="{self.ancho}" height="{self.alto}" fill="white"/>',
            f'<text x="{self.ancho / 2:.1f}" y="{m / 2:.1f}" text-anchor="middle" font-size="14">{escape(titulo)}</text>',
            f'<line x1="{m}" y1="{self.alto - m}" x2="{self.ancho - m}" y2="{self.alto - m}" stroke="black"/>',
            f'<line x1="{m}" y1="{m}" x2="{m}" y2="{self.alto - m}" stroke="black"/>',
        ]
        for t in np.linspace(y0, y1, 5):
            partes.append(
                f'<text x="{m - 6}" y="{py(t) + 4:.2f}" text-anchor="end">{t:.3f}</text>'
                f'<line x1="{m - 3}" y1="{py(t):.2f}" x2="{m}" y2="{py(t):.2f}" stroke="black"/>'
            )
        for t in np.linspace(x0, x1, 5):
            partes.append(f'<text x="{px(t):.2f}" y="{self.alto - m + 16}" text-anchor="middle">{t:.0f}</text>')
        partes.append(f'<text x="{self.ancho / 2:.1f}" y="{self.alto - 12}" text-anchor="middle">cuadro</text>')
        partes.append(
            f'<text x="14" y="{self.alto / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {self.alto / 2:.1f})">{escape(eje_y)}</text>'
        )

        for k, columna in enumerate(datos.columns):
            color = PALETA[k % len(PALETA)]
            puntos = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, valores[:, k]) if np.isfinite(b))
            partes.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{puntos}"/>')
            ly = m + 14 * k
            partes.append(
                f'<line x1="{self.ancho - m - 110}" y1="{ly}" x2="{self.ancho - m - 92}" y2="{ly}" stroke="{color}" stroke-width="2"/>'
                f'<text x="{self.ancho - m - 88}" y="{ly + 4}">{escape(str(columna))}</text>'
            )
        partes.append("</svg>")
        return "\n".join(partes) + "\n"

    def save_chart(self, datos: pd.DataFrame, path: Union[str, Path], titulo: Optional[str] = None) -> Path:
        path = Path(path)
        path.write_text(self.gen_chart(datos, titulo or "Error absoluto por cuadro"), encoding="utf-8")
        logger.info(f"Gráfico SVG escrito en {path}")
        return path

    def gen_timeline(self, datos: pd.DataFrame, titulo: str = "Error absoluto por cuadro") -> go.Figure:
        """Versión interactiva (plotly) del mismo gráfico."""
        fig = go.Figure()
        for columna in datos.columns:
            fig.add_trace(go.Scatter(x=datos.index, y=datos[columna], mode="lines", name=str(columna)))
        fig.update_layout(title=titulo, xaxis_title="cuadro", yaxis_title="abs_rel", template="plotly_white")
        return fig

    def save_timeline(self, datos: pd.DataFrame, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.gen_timeline(datos).write_html(str(path), include_plotlyjs="cdn")
        logger.info(f"Gráfico interactivo escrito en {path}")
        return path
