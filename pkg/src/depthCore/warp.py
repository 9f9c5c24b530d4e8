#!/usr/bin/python
# -*- coding: utf-8 -*-
"""
warp.py

Síntesis diferenciable de vistas: reconstruye la imagen objetivo muestreando
la imagen fuente en las coordenadas proyectadas con profundidad y pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from depthCore.autodiff import ShapeError, Tensor, as_tensor, get_dtype, grid_sample, reshape
from depthCore.geometry import CameraIntrinsics, Pose, backproject, project, transform_points


@dataclass
class SamplingGrid:
    """Posiciones de muestreo normalizadas en [-1, 1], forma (N, 2, H, W) o (2, H, W)."""

    coords: Tensor

    def __post_init__(self) -> None:
        self.coords = as_tensor(self.coords)
        if self.coords.shape[-3] != 2:
            raise ShapeError("La grilla debe tener 2 canales (x, y).")
        if not np.all(np.isfinite(self.coords.data)):
            raise ValueError("La grilla contiene valores no finitos.")


def identity_grid(width: int, height: int) -> SamplingGrid:
    """Grilla que reproduce la imagen tal cual."""
    xs = np.linspace(-1.0, 1.0, width)
    ys = np.linspace(-1.0, 1.0, height)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return SamplingGrid(Tensor(np.stack([gx, gy]).astype(get_dtype())))


def bilinear_sample(image: Tensor | np.ndarray, grid: SamplingGrid | Tensor) -> Tensor:
    """Interpolación bilineal con recorte al borde.

    Args:
        image: (C, H, W) o (N, C, H, W).
        grid: Grilla con la misma forma espacial que la salida deseada.
    """
    image = as_tensor(image)
    coords = grid.coords if isinstance(grid, SamplingGrid) else as_tensor(grid)
    if image.ndim == 3:
        out = grid_sample(reshape(image, (1,) + image.shape), reshape(coords, (1,) + coords.shape))
        return reshape(out, out.shape[1:])
    return grid_sample(image, coords)


def warp(source: Tensor | np.ndarray, depth: Tensor | np.ndarray, T: Pose, K: CameraIntrinsics) -> Tensor:
    """Î = muestreo de `source` en project(transform(T, backproject(depth, K)), K).

    Diferenciable respecto a la profundidad, la pose y la imagen fuente.
    """
    source = as_tensor(source)
    depth = as_tensor(depth)
    if source.shape[-2:] != depth.shape[-2:]:
        raise ShapeError(f"warp: imagen {source.shape} y profundidad {depth.shape} no coinciden.")
    pts = transform_points(T, backproject(depth, K))
    return bilinear_sample(source, SamplingGrid(project(pts, K)))
