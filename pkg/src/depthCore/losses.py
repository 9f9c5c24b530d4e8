#!/usr/bin/python
# -*- coding: utf-8 -*-
"""
losses.py

Objetivo auto-supervisado: L = alpha·E_p + E_dis.

- P(p, q): mezcla de SSIM y L1 por píxel.
- Mínimo por píxel sobre las imágenes fuente (oclusiones).
- Auto-máscara μ: descarta píxeles donde la fuente sin deformar ya explica el
  objetivo mejor que la deformada (escenas estáticas, objetos que se mueven
  con la cámara).
- Suavidad consciente de bordes sobre la disparidad normalizada por su media.
- Multiescala: cada disparidad se sube a resolución completa antes de deformar.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from depthCore.autodiff import (
    Tensor,
    as_tensor,
    avg_pool3x3,
    exp,
    mean,
    min_axis,
    concat,
    reflection_pad,
    tabs,
    upsample_nearest2x,
)
from depthCore.geometry import Pose
from depthCore.models import DepthRange, disp_to_depth
from depthCore.scenes import FrameBatch, FrameBundle
from depthCore.warp import warp

logger = logging.getLogger(__name__)

C1 = 0.01**2
C2 = 0.03**2

TRACE_COLUMNS = ["step", "total", "photometric", "smoothness", "mask_ratio"]


@dataclass(frozen=True)
class LossWeights:
    """Pesos del objetivo.

    Attributes:
        alpha: Peso del término fotométrico.
        beta: Mezcla SSIM/L1 dentro de P.
        lambda_smooth: Escala de la suavidad dentro de E_dis.
        scales: Número de escalas usadas.
        automask: Si False, todos los píxeles cuentan (μ = 1).
    """

    alpha: float = 1.0
    beta: float = 0.85
    lambda_smooth: float = 1e-3
    scales: int = 2
    automask: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta debe estar en [0, 1].")
        if self.alpha < 0 or self.lambda_smooth < 0:
            raise ValueError("alpha y lambda_smooth no pueden ser negativos.")
        if self.scales < 1:
            raise ValueError("scales debe ser >= 1.")


@dataclass
class LossBreakdown:
    """Componentes escalares de la pérdida; `loss` es el escalar diferenciable."""

    total: float
    photometric: float
    smoothness: float
    mask_ratio: float
    loss: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio debe estar en [0, 1].")

    def to_row(self, step: int) -> Dict[str, float]:
        return {
            "step": step,
            "total": self.total,
            "photometric": self.photometric,
            "smoothness": self.smoothness,
            "mask_ratio": self.mask_ratio,
        }


@dataclass
class Predictions:
    """Salidas de las redes para un objetivo.

    Attributes:
        disparities: Una por escala, resolución completa primero.
        poses: Pose por imagen fuente ("prev", "next", "stereo").
        depths: Alternativa a `disparities`: profundidad a resolución completa
            optimizada directamente.
    """

    disparities: List[Tensor] = field(default_factory=list)
    poses: Dict[str, Pose] = field(default_factory=dict)
    depths: List[Tensor] = field(default_factory=list)

    def __post_init__(self) -> None:
        if bool(self.disparities) == bool(self.depths):
            raise ValueError("Indique disparidades o profundidades, no ambas.")
        if not self.poses:
            raise ValueError("Se requiere al menos una pose de imagen fuente.")


def _con_lote(x: Tensor | np.ndarray) -> Tensor:
    x = as_tensor(x)
    return x.reshape((1,) + x.shape) if x.ndim == 3 else x


def ssim(p: Tensor | np.ndarray, q: Tensor | np.ndarray, c1: float = C1, c2: float = C2) -> Tensor:
    """Mapa SSIM por píxel y canal, con estadísticas locales 3x3 y relleno por reflexión."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"ssim: formas distintas {p.shape} y {q.shape}.")
    sin_lote = p.ndim == 3
    p, q = _con_lote(p), _con_lote(q)

    def pool(x: Tensor) -> Tensor:
        return avg_pool3x3(reflection_pad(x, 1))

    mu_p, mu_q = pool(p), pool(q)
    sigma_p = pool(p * p) - mu_p * mu_p
    sigma_q = pool(q * q) - mu_q * mu_q
    sigma_pq = pool(p * q) - mu_p * mu_q
    num = (mu_p * mu_q * 2.0 + c1) * (sigma_pq * 2.0 + c2)
    den = (mu_p * mu_p + mu_q * mu_q + c1) * (sigma_p + sigma_q + c2)
    out = num / den
    return out.reshape(out.shape[1:]) if sin_lote else out


def photometric_pe(p: Tensor | np.ndarray, q: Tensor | np.ndarray, beta: float = 0.85) -> Tensor:
    """P = beta·(1 - SSIM)/2 + (1 - beta)·mean_C|p - q|, promediado por canal.

    Returns:
        (N, 1, H, W), o (1, H, W) para entradas sin lote.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"photometric_pe: formas distintas {p.shape} y {q.shape}.")
    sin_lote = p.ndim == 3
    p, q = _con_lote(p), _con_lote(q)
    l1 = mean(tabs(p - q), axis=1, keepdims=True)
    if beta > 0:
        disimilitud = mean((1.0 - ssim(p, q)) * 0.5, axis=1, keepdims=True)
        out = disimilitud * beta + l1 * (1.0 - beta)
    else:
        out = l1
    return out.reshape(out.shape[1:]) if sin_lote else out


def min_reprojection(error_maps: Sequence[Tensor]) -> Tensor:
    """Mínimo por píxel entre mapas; en empate gana el primero de la lista."""
    if not error_maps:
        raise ValueError("min_reprojection requiere al menos un mapa.")
    if len(error_maps) == 1:
        return as_tensor(error_maps[0])
    formas = {m.shape for m in error_maps}
    if len(formas) != 1:
        raise ValueError(f"Los mapas deben tener la misma forma, se recibió {formas}.")
    apilados = concat([_con_lote(m) if m.ndim == 3 else m for m in error_maps], axis=-3)
    out = min_axis(apilados, axis=-3, keepdims=True)
    return out.reshape(out.shape[1:]) if error_maps[0].ndim == 3 else out


def _mascara(reproj_min: np.ndarray, identidad_min: np.ndarray) -> np.ndarray:
    return (reproj_min < identidad_min).astype(reproj_min.dtype)


def auto_mask(
    target: Tensor | np.ndarray,
    warped: Sequence[Tensor | np.ndarray],
    sources: Sequence[Tensor | np.ndarray],
    beta: float = 0.85,
) -> np.ndarray:
    """μ = [min_s P(I^t, Î_s) < min_s P(I^t, I_s)], comparación estricta.

    Returns:
        Arreglo {0, 1} con la forma del mapa de error.
    """
    if len(warped) != len(sources) or not warped:
        raise ValueError("auto_mask requiere listas no vacías de igual longitud.")
    reproj = min_reprojection([photometric_pe(target, w, beta) for w in warped])
    identidad = min_reprojection([photometric_pe(target, s, beta) for s in sources])
    return _mascara(reproj.data, identidad.data)


def smoothness(disp: Tensor | np.ndarray, image: Tensor | np.ndarray, lambda_smooth: float = 1e-3) -> Tensor:
    """E_dis = λ·(mean(|∂x d*|·e^{-|∂x I|}) + mean(|∂y d*|·e^{-|∂y I|})), con d* = disp/mean(disp)."""
    disp = _con_lote(disp)
    img = np.asarray(_con_lote(image).data)
    if np.any(disp.data <= 0):
        raise ValueError("La disparidad debe ser positiva.")
    d = disp / mean(disp, axis=(2, 3), keepdims=True)
    dx = tabs(d[:, :, :, 1:] - d[:, :, :, :-1])
    dy = tabs(d[:, :, 1:, :] - d[:, :, :-1, :])
    wx = np.exp(-np.mean(np.abs(img[:, :, :, 1:] - img[:, :, :, :-1]), axis=1, keepdims=True))
    wy = np.exp(-np.mean(np.abs(img[:, :, 1:, :] - img[:, :, :-1, :]), axis=1, keepdims=True))
    return (mean(dx * wx) + mean(dy * wy)) * lambda_smooth


def _reducir(image: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return image
    n, c, h, w = image.shape
    return image.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def _subir(disp: Tensor, factor: int) -> Tensor:
    while factor > 1:
        disp = upsample_nearest2x(disp)
        factor //= 2
    return disp


def total_loss(
    frames: Union[FrameBundle, FrameBatch],
    predictions: Predictions,
    weights: LossWeights = LossWeights(),
    depth_range: DepthRange = DepthRange(),
) -> LossBreakdown:
    """Pérdida total promediada sobre escalas.

    Por escala: sube la disparidad a resolución completa, la convierte en
    profundidad, deforma cada fuente, toma el mínimo por píxel, aplica μ y
    normaliza por el total de píxeles; suma la suavidad de esa escala.
    """
    nombres = list(predictions.poses)
    lote = frames if isinstance(frames, FrameBatch) else frames.to_batch(nombres)
    faltantes = [n for n in nombres if n not in lote.sources]
    if faltantes:
        raise ValueError(f"Faltan imágenes fuente {faltantes} para las poses predichas.")
    objetivo = lote.target
    h = objetivo.shape[-2]
    K = lote.intrinsics

    identidad_min: Optional[np.ndarray] = None
    if weights.automask:
        identidad = [photometric_pe(objetivo, lote.sources[n], weights.beta) for n in nombres]
        identidad_min = min_reprojection(identidad).data

    if predictions.depths:
        pares = [(1.0 / _con_lote(d), _con_lote(d)) for d in predictions.depths]
    else:
        pares = []
        for disp in predictions.disparities[: weights.scales]:
            disp = _con_lote(disp)
            pares.append((disp, disp_to_depth(_subir(disp, h // disp.shape[-2]), depth_range)))

    por_escala: List[Tensor] = []
    fotometricos: List[float] = []
    suavidades: List[float] = []
    proporciones: List[float] = []
    for disp, profundidad in pares:
        errores = [
            photometric_pe(objetivo, warp(lote.sources[n], profundidad, predictions.poses[n], K), weights.beta)
            for n in nombres
        ]
        reproj = min_reprojection(errores)
        if identidad_min is None:
            mu = np.ones_like(reproj.data)
        else:
            mu = _mascara(reproj.data, identidad_min)
        e_p = (reproj * mu).sum() * (1.0 / reproj.data.size)
        e_dis = smoothness(disp, _reducir(objetivo, h // disp.shape[-2]), weights.lambda_smooth)
        por_escala.append(e_p * weights.alpha + e_dis)
        fotometricos.append(float(e_p.data))
        suavidades.append(float(e_dis.data))
        proporciones.append(float(mu.mean()))

    total = por_escala[0]
    for termino in por_escala[1:]:
        total = total + termino
    total = total * (1.0 / len(por_escala))
    return LossBreakdown(
        total=float(total.data),
        photometric=float(np.mean(fotometricos)),
        smoothness=float(np.mean(suavidades)),
        mask_ratio=float(np.mean(proporciones)),
        loss=total,
    )
