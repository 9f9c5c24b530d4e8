#!/usr/bin/python
# -*- coding: utf-8 -*-
"""
geometry.py

Modelo de cámara pinhole y álgebra de poses SE(3).

Convenciones:
- Ejes de cámara: x a la derecha, y hacia abajo, z hacia adelante.
- Centros de píxel en coordenadas enteras; la normalización lleva 0 -> -1 y
  (W-1) -> +1.
- Una `Pose` lleva puntos de la cámara objetivo a la cámara fuente:
  p' = R·p + t.
- Todas las operaciones aceptan entradas por lote (N, ...) o sin lote.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from depthCore.autodiff import (
    Tensor,
    as_tensor,
    clamp,
    concat,
    cos,
    get_dtype,
    matmul,
    reshape,
    sin,
    sqrt,
    transpose,
)

logger = logging.getLogger(__name__)

Z_MIN = 1e-3
SMALL_ANGLE = 1e-7

# Generadores de so(3): [w]x = w0*G0 + w1*G1 + w2*G2
_GENERADORES = np.array(
    [
        [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
        [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
        [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Intrínsecos pinhole en píxeles.

    Attributes:
        fx, fy: Distancias focales.
        cx, cy: Punto principal.
        width, height: Tamaño de la imagen.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("fx y fy deben ser positivos.")
        if not 0 < self.cx < self.width:
            raise ValueError("cx debe estar dentro de (0, width).")
        if not 0 < self.cy < self.height:
            raise ValueError("cy debe estar dentro de (0, height).")

    @classmethod
    def kitti_like(cls, width: int, height: int) -> "CameraIntrinsics":
        """Intrínsecos con la proporción típica de un vehículo (KITTI normalizado)."""
        return cls(
            fx=0.58 * width,
            fy=1.92 * height,
            cx=0.5 * width,
            cy=0.5 * height,
            width=int(width),
            height=int(height),
        )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, texto: str) -> "CameraIntrinsics":
        datos = json.loads(texto)
        faltantes = {"fx", "fy", "cx", "cy", "width", "height"} - set(datos)
        if faltantes:
            raise ValueError(f"Intrínsecos incompletos, faltan {sorted(faltantes)}.")
        return cls(
            fx=float(datos["fx"]),
            fy=float(datos["fy"]),
            cx=float(datos["cx"]),
            cy=float(datos["cy"]),
            width=int(datos["width"]),
            height=int(datos["height"]),
        )


@dataclass
class Pose:
    """Transformación rígida con rotación (..., 3, 3) y traslación (..., 3)."""

    rotation: Tensor
    translation: Tensor

    @property
    def batched(self) -> bool:
        return self.rotation.ndim == 3

    @classmethod
    def identity(cls, batch: int | None = None) -> "Pose":
        r = np.eye(3)
        t = np.zeros(3)
        if batch is not None:
            r = np.broadcast_to(r, (batch, 3, 3)).copy()
            t = np.zeros((batch, 3))
        return cls(Tensor(r), Tensor(t))

    @classmethod
    def from_numpy(cls, rotation: np.ndarray, translation: np.ndarray, tol: float = 1e-6) -> "Pose":
        """Construye una pose validando que R sea una rotación propia."""
        r = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        if r.shape[-2:] != (3, 3) or t.shape[-1] != 3:
            raise ValueError("La rotación debe ser 3x3 y la traslación un vector de 3.")
        eye = np.broadcast_to(np.eye(3), r.shape)
        if np.max(np.abs(np.swapaxes(r, -1, -2) @ r - eye)) > tol:
            raise ValueError("La rotación no es ortonormal.")
        if np.max(np.abs(np.linalg.det(r) - 1.0)) > tol:
            raise ValueError("La rotación debe tener determinante +1.")
        return cls(Tensor(r), Tensor(t))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64)
        return cls.from_numpy(m[..., :3, :3], m[..., :3, 3])


@dataclass(frozen=True)
class PoseVector:
    """Salida de la red de pose: eje-ángulo (radianes) y traslación."""

    axis_angle: Tuple[float, float, float]
    translation: Tuple[float, float, float]

    def __post_init__(self) -> None:
        if len(self.axis_angle) != 3 or len(self.translation) != 3:
            raise ValueError("axis_angle y translation deben tener 3 componentes.")
        if np.linalg.norm(self.axis_angle) >= np.pi:
            raise ValueError("|axis_angle| debe ser menor que pi.")

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.axis_angle), np.asarray(self.translation)])

    @classmethod
    def from_array(cls, v: np.ndarray) -> "PoseVector":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(tuple(v[:3]), tuple(v[3:]))


def pixel_grid(width: int, height: int) -> Tensor:
    """Coordenadas homogéneas (u, v, 1) de cada píxel, forma (3, H, W)."""
    if width < 2 or height < 2:
        raise ValueError("width y height deben ser >= 2.")
    v, u = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return Tensor(np.stack([u, v, np.ones_like(u)]).astype(get_dtype()))


def _rayos(K: CameraIntrinsics, height: int, width: int) -> np.ndarray:
    grid = pixel_grid(width, height).data
    return np.stack(
        [(grid[0] - K.cx) / K.fx, (grid[1] - K.cy) / K.fy, grid[2]]
    ).astype(get_dtype())


def backproject(depth: Tensor | np.ndarray, K: CameraIntrinsics) -> Tensor:
    """Puntos en el marco de la cámara: depth(u,v) · K^-1 · (u, v, 1).

    Args:
        depth: (N, 1, H, W) o (1, H, W), estrictamente positiva.

    Returns:
        (N, 3, H, W) o (3, H, W).
    """
    depth = as_tensor(depth)
    if np.any(depth.data <= 0):
        raise ValueError("La profundidad debe ser positiva en todos los píxeles.")
    h, w = depth.shape[-2:]
    rayos = _rayos(K, h, w)
    if depth.ndim == 4:
        rayos = rayos[None]
    return depth * rayos


def transform_points(T: Pose, pts: Tensor) -> Tensor:
    """Aplica p' = R·p + t a una nube (N, 3, H, W) o (3, H, W)."""
    sin_lote = pts.ndim == 3
    if sin_lote:
        pts = reshape(pts, (1,) + pts.shape)
    n, _, h, w = pts.shape
    rot, tras = T.rotation, T.translation
    if rot.ndim == 2:
        rot = reshape(rot, (1, 3, 3))
        tras = reshape(tras, (1, 3))
    planos = reshape(pts, (n, 3, h * w))
    movidos = matmul(rot, planos) + reshape(tras, (tras.shape[0], 3, 1))
    out = reshape(movidos, (n, 3, h, w))
    return reshape(out, (3, h, w)) if sin_lote else out


def project(pts: Tensor, K: CameraIntrinsics) -> Tensor:
    """Proyecta puntos de cámara a coordenadas de muestreo normalizadas en [-1, 1].

    Z se recorta por debajo en Z_MIN antes de dividir. Las coordenadas fuera
    de la imagen se devuelven tal cual; el muestreador las recorta al borde.
    """
    sin_lote = pts.ndim == 3
    if sin_lote:
        pts = reshape(pts, (1,) + pts.shape)
    n, _, h, w = pts.shape
    x, y, z = pts[:, 0:1], pts[:, 1:2], pts[:, 2:3]
    z = clamp(z, lo=Z_MIN)
    u = x / z * K.fx + K.cx
    v = y / z * K.fy + K.cy
    un = u * (2.0 / (w - 1)) - 1.0
    vn = v * (2.0 / (h - 1)) - 1.0
    out = concat([un, vn], axis=1)
    return reshape(out, (2, h, w)) if sin_lote else out


def _rodrigues(w: Tensor) -> Tensor:
    """Rotación 3x3 a partir de un vector eje-ángulo (3,)."""
    eye = np.eye(3, dtype=get_dtype())
    theta = float(np.linalg.norm(w.data))
    gen = _GENERADORES.astype(get_dtype())
    if theta < SMALL_ANGLE:
        return w[0] * gen[0] + w[1] * gen[1] + w[2] * gen[2] + eye
    angulo = sqrt((w * w).sum())
    k = w / angulo
    kx = k[0] * gen[0] + k[1] * gen[1] + k[2] * gen[2]
    return eye + sin(angulo) * kx + (1.0 - cos(angulo)) * matmul(kx, kx)


def pose_vec_to_pose(v: Tensor | np.ndarray | PoseVector) -> Pose:
    """Convierte un vector (eje-ángulo, traslación) en una Pose vía Rodrigues.

    Acepta (6,) o (N, 6); la rama de ángulo pequeño (|w| < 1e-7) usa
    R = I + [w]x y se decide por muestra.
    """
    if isinstance(v, PoseVector):
        v = v.as_array()
    v = as_tensor(v)
    if v.shape[-1] != 6:
        raise ValueError("El vector de pose debe tener 6 componentes.")
    if v.ndim == 1:
        return Pose(_rodrigues(v[0:3]), v[3:6])
    rotaciones = [reshape(_rodrigues(v[i, 0:3]), (1, 3, 3)) for i in range(v.shape[0])]
    return Pose(concat(rotaciones, axis=0), v[:, 3:6])


def invert_pose(T: Pose) -> Pose:
    """(R, t)^-1 = (R^T, -R^T t)."""
    if T.batched:
        rt = transpose(T.rotation, (0, 2, 1))
        t = reshape(T.translation, (T.translation.shape[0], 3, 1))
        return Pose(rt, reshape(matmul(rt, t), (T.translation.shape[0], 3)) * -1.0)
    rt = transpose(T.rotation, (1, 0))
    t = reshape(T.translation, (3, 1))
    return Pose(rt, reshape(matmul(rt, t), (3,)) * -1.0)


def compose_pose(a: Pose, b: Pose) -> Pose:
    """a ∘ b: aplica primero b y luego a."""
    r = matmul(a.rotation, b.rotation)
    tb = reshape(b.translation, b.translation.shape + (1,))
    t = reshape(matmul(a.rotation, tb), a.translation.shape) + a.translation
    return Pose(r, t)


def stereo_pose(baseline: float, batch: int | None = None) -> Pose:
    """Pose fija izquierda -> derecha: traslación pura (-b, 0, 0)."""
    if baseline <= 0:
        raise ValueError("La línea base estéreo debe ser positiva.")
    pose = Pose.identity(batch)
    t = np.zeros_like(pose.translation.data)
    t[..., 0] = -baseline
    pose.translation = Tensor(t)
    return pose


def pose_to_matrix(T: Pose) -> np.ndarray:
    """Matriz homogénea 4x4 (o (N, 4, 4)) en numpy."""
    r = np.asarray(T.rotation.data, dtype=np.float64)
    t = np.asarray(T.translation.data, dtype=np.float64)
    m = np.zeros(r.shape[:-2] + (4, 4))
    m[..., :3, :3] = r
    m[..., :3, 3] = t
    m[..., 3, 3] = 1.0
    return m


def rotation_to_axis_angle(rotation: np.ndarray) -> np.ndarray:
    """Mapa logarítmico de SO(3) a eje-ángulo, ángulo en [0, pi]."""
    r = np.asarray(rotation, dtype=np.float64)
    coseno = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(coseno))
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < SMALL_ANGLE:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        # Cerca de pi: el eje es la columna dominante de (R + I) / 2
        b = (r + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(b)))
        eje = b[:, i] / np.sqrt(b[i, i])
        return theta * eje / np.linalg.norm(eje)
    return theta * vee / (2.0 * np.sin(theta))

