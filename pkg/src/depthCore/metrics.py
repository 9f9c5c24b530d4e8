#!/usr/bin/python
# -*- coding: utf-8 -*-
"""
metrics.py

Las siete métricas estándar de profundidad más el escalado por mediana
(monocular) y el escalado por factor conocido (estéreo).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["abs_rel", "sq_rel", "rmse", "rmse_log", "d1", "d2", "d3"]

DEFAULT_CAP = 80.0
DEFAULT_FLOOR = 1e-3


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def __post_init__(self) -> None:
        valores = np.array(list(asdict(self).values()), dtype=np.float64)
        if not np.all(np.isfinite(valores)):
            raise ValueError("Las métricas deben ser finitas.")
        if not 0.0 <= self.delta1 <= self.delta2 <= self.delta3 <= 1.0:
            raise ValueError("Se requiere 0 <= delta1 <= delta2 <= delta3 <= 1.")

    def to_row(self) -> Dict[str, float]:
        """Fila CSV en el orden abs_rel, sq_rel, rmse, rmse_log, d1, d2, d3."""
        return dict(zip(METRIC_COLUMNS, (self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3)))

    @classmethod
    def mean(cls, metricas: Sequence["DepthMetrics"]) -> "DepthMetrics":
        if not metricas:
            raise ValueError("No hay métricas para promediar.")
        valores = np.mean([list(asdict(m).values()) for m in metricas], axis=0)
        return cls(*(float(v) for v in valores))


def valid_mask(gt: np.ndarray, mask: Optional[np.ndarray] = None, cap: float = DEFAULT_CAP, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """floor < gt < cap, intersectado con `mask`."""
    valido = (gt > floor) & (gt < cap)
    if mask is not None:
        valido &= mask.astype(bool)
    return valido


def median_scale(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, float]:
    """Escala la predicción por median(gt)/median(pred) sobre los píxeles válidos.

    Raises:
        ValueError: Máscara vacía o valores no positivos.
    """
    mask = mask.astype(bool)
    if not np.any(mask):
        raise ValueError("La máscara de píxeles válidos está vacía.")
    p, g = pred[mask].astype(np.float64), gt[mask].astype(np.float64)
    if np.any(p <= 0) or np.any(g <= 0):
        raise ValueError("pred y gt deben ser positivos en los píxeles válidos.")
    escala = float(np.median(g) / np.median(p))
    return pred * escala, escala


def baseline_scale(pred: np.ndarray, factor: float = 1.0) -> np.ndarray:
    """Multiplica por un factor métrico conocido (línea base estéreo)."""
    if factor <= 0:
        raise ValueError("El factor de escala debe ser positivo.")
    return pred * factor


def compute_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    mask: Optional[np.ndarray] = None,
    cap: float = DEFAULT_CAP,
    floor: float = DEFAULT_FLOOR,
) -> DepthMetrics:
    """Métricas sobre los píxeles floor < gt < cap (y `mask`); la predicción se recorta a [floor, cap]."""
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} y gt {gt.shape} deben tener la misma forma.")
    valido = valid_mask(gt, mask, cap, floor)
    if not np.any(valido):
        raise ValueError("La máscara de píxeles válidos está vacía.")
    g = gt[valido].astype(np.float64)
    p = np.clip(pred[valido].astype(np.float64), floor, cap)

    razon = np.maximum(g / p, p / g)
    diff = p - g
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(razon < 1.25)),
        delta2=float(np.mean(razon < 1.25**2)),
        delta3=float(np.mean(razon < 1.25**3)),
    )


def evaluate(
    pred: np.ndarray,
    gt: np.ndarray,
    scaling: str = "median",
    mask: Optional[np.ndarray] = None,
    cap: float = DEFAULT_CAP,
    floor: float = DEFAULT_FLOOR,
    factor: float = 1.0,
) -> DepthMetrics:
    """Aplica el escalado (`median`, `baseline` o `none`) y calcula las métricas."""
    if scaling == "median":
        pred, _ = median_scale(pred, gt, valid_mask(gt, mask, cap, floor))
    elif scaling == "baseline":
        pred = baseline_scale(pred, factor)
    elif scaling != "none":
        raise ValueError("scaling debe ser 'median', 'baseline' o 'none'.")
    return compute_metrics(pred, gt, mask, cap, floor)


def eigen_crop_mask(height: int, width: int) -> np.ndarray:
    """Recorte clásico de evaluación (filas 0.40810811-0.99189189, columnas 0.03594771-0.96405229)."""
    m = np.zeros((height, width), dtype=bool)
    m[int(0.40810811 * height):int(0.99189189 * height), int(0.03594771 * width):int(0.96405229 * width)] = True
    return m


def metrics_table(per_frame: Sequence[Tuple[int, DepthMetrics]]) -> pd.DataFrame:
    """Una fila por cuadro más una fila final 'mean'."""
    filas: List[Dict] = [{"frame": idx, **m.to_row()} for idx, m in per_frame]
    df = pd.DataFrame(filas, columns=["frame"] + METRIC_COLUMNS)
    if filas:
        resumen = {"frame": "mean", **DepthMetrics.mean([m for _, m in per_frame]).to_row()}
        df = pd.concat([df, pd.DataFrame([resumen])], ignore_index=True)
    return df


def summary_frame(metricas: DepthMetrics) -> pd.DataFrame:
    """Fila única en el orden de columnas de las tablas de resultados."""
    return pd.DataFrame([metricas.to_row()], columns=METRIC_COLUMNS)


@dataclass(frozen=True)
class EvalConfig:
    """Protocolo de evaluación compartido por adapt, eval y ablate.

    Attributes:
        scaling: "median", "baseline" o "none".
        cap: Profundidad máxima considerada.
        floor: Profundidad mínima considerada.
        crop: Si True, aplica el recorte clásico de evaluación.
        factor: Factor métrico para scaling = "baseline".
    """

    scaling: str = "median"
    cap: float = DEFAULT_CAP
    floor: float = DEFAULT_FLOOR
    crop: bool = False
    factor: float = 1.0

    def __post_init__(self) -> None:
        if self.scaling not in ("median", "baseline", "none"):
            raise ValueError("scaling debe ser 'median', 'baseline' o 'none'.")
        if not 0 <= self.floor < self.cap:
            raise ValueError("Se requiere 0 <= floor < cap.")

    def evaluate(self, pred: np.ndarray, gt: np.ndarray) -> DepthMetrics:
        mask = eigen_crop_mask(*gt.shape) if self.crop else None
        return evaluate(pred, gt, self.scaling, mask, self.cap, self.floor, self.factor)
