#!/usr/bin/python
# -*- coding: utf-8 -*-
"""
scenes.py

Fábrica de escenas sintéticas con verdad de terreno exacta.

Las escenas son rectángulos texturizados (las cajas se expanden en seis
caras) vistos por una cámara pinhole que sigue una trayectoria conocida. El
render es por trazado de rayos: la profundidad es la distancia z analítica al
plano más cercano y la textura es ruido de valor suave de 3 octavas.

Convenciones:
- Ejes de cámara: x a la derecha, y hacia abajo, z hacia adelante.
- La trayectoria guarda matrices 4x4 mundo-desde-cámara.
- El suelo de la escena procedural está en y = 1.5.
- Los rayos que no chocan con nada reciben profundidad `background_depth` y
  valor `background_value`.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import cv2
import numpy as np

from depthCore.geometry import CameraIntrinsics

logger = logging.getLogger(__name__)

STATIONARY_THRESHOLD = 1e-3
SOURCE_NAMES = ("prev", "next", "stereo")


# ----------------------------------------------------------------------------
# Primitivas
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Rectangle:
    """Rectángulo texturizado: centro, ejes locales unitarios y semi-extensiones (m)."""

    center: Tuple[float, float, float]
    axis_u: Tuple[float, float, float]
    axis_v: Tuple[float, float, float]
    half_u: float
    half_v: float
    texture_seed: int = 0

    def __post_init__(self) -> None:
        u = np.asarray(self.axis_u, dtype=np.float64)
        v = np.asarray(self.axis_v, dtype=np.float64)
        if self.half_u <= 0 or self.half_v <= 0:
            raise ValueError("Las semi-extensiones deben ser positivas.")
        if abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9 or abs(u @ v) > 1e-9:
            raise ValueError("axis_u y axis_v deben ser unitarios y ortogonales.")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    def transformed(self, matrix: np.ndarray) -> "Rectangle":
        """Rectángulo llevado por una transformación rígida 4x4."""
        r, t = matrix[:3, :3], matrix[:3, 3]
        return Rectangle(
            center=tuple(r @ np.asarray(self.center) + t),
            axis_u=tuple(r @ np.asarray(self.axis_u)),
            axis_v=tuple(r @ np.asarray(self.axis_v)),
            half_u=self.half_u,
            half_v=self.half_v,
            texture_seed=self.texture_seed,
        )

    def distance_to(self, point: np.ndarray) -> float:
        """Distancia euclídea del punto al rectángulo finito."""
        d = np.asarray(point) - np.asarray(self.center)
        a = np.clip(d @ np.asarray(self.axis_u), -self.half_u, self.half_u)
        b = np.clip(d @ np.asarray(self.axis_v), -self.half_v, self.half_v)
        cercano = np.asarray(self.center) + a * np.asarray(self.axis_u) + b * np.asarray(self.axis_v)
        return float(np.linalg.norm(np.asarray(point) - cercano))


def box(center: Sequence[float], size: Sequence[float], texture_seed: int = 0) -> List[Rectangle]:
    """Seis caras de una caja alineada con los ejes."""
    c = np.asarray(center, dtype=np.float64)
    sx, sy, sz = (0.5 * float(s) for s in size)
    ex, ey, ez = np.eye(3)
    caras = [
        (c - sz * ez, ex, ey, sx, sy),
        (c + sz * ez, ex, ey, sx, sy),
        (c - sx * ex, ez, ey, sz, sy),
        (c + sx * ex, ez, ey, sz, sy),
        (c - sy * ey, ex, ez, sx, sz),
        (c + sy * ey, ex, ez, sx, sz),
    ]
    return [
        Rectangle(tuple(cc), tuple(u), tuple(v), hu, hv, texture_seed * 8 + k)
        for k, (cc, u, v, hu, hv) in enumerate(caras)
    ]


@dataclass
class MovingObject:
    """Primitivas en el marco del objeto y su pose mundo-desde-objeto por cuadro."""

    primitives: List[Rectangle]
    poses: List[np.ndarray]


def rigid(axis_angle: Sequence[float] = (0.0, 0.0, 0.0), translation: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Matriz 4x4 a partir de eje-ángulo y traslación (Rodrigues de OpenCV)."""
    r, _ = cv2.Rodrigues(np.asarray(axis_angle, dtype=np.float64).reshape(3, 1))
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = np.asarray(translation, dtype=np.float64)
    return m


def invert_rigid(m: np.ndarray) -> np.ndarray:
    inv = np.eye(4)
    inv[:3, :3] = m[:3, :3].T
    inv[:3, 3] = -m[:3, :3].T @ m[:3, 3]
    return inv


@dataclass
class SceneSpec:
    """Escena sintética completa.

    Attributes:
        seed: Semilla de texturas y de la partición train/val/test.
        primitives: Rectángulos estáticos en coordenadas de mundo.
        trajectory: Poses mundo-desde-cámara (izquierda) por cuadro.
        intrinsics: Cámara compartida por toda la secuencia.
        stereo_baseline: Separación en x de la cámara derecha, si existe.
        moving_objects: Objetos con pose propia por cuadro.
        channels: 1 (pgm) o 3 (ppm).
    """

    seed: int
    primitives: List[Rectangle]
    trajectory: List[np.ndarray]
    intrinsics: CameraIntrinsics
    stereo_baseline: Optional[float] = None
    moving_objects: List[MovingObject] = field(default_factory=list)
    channels: int = 3
    background_depth: float = 100.0
    background_value: float = 0.5
    d_min: float = 0.1

    def __post_init__(self) -> None:
        if len(self.trajectory) < 2:
            raise ValueError("La trayectoria necesita al menos 2 poses.")
        if self.channels not in (1, 3):
            raise ValueError("channels debe ser 1 o 3.")
        if self.stereo_baseline is not None and self.stereo_baseline <= 0:
            raise ValueError("stereo_baseline debe ser positivo.")
        for k, obj in enumerate(self.moving_objects):
            if len(obj.poses) != len(self.trajectory):
                raise ValueError(f"moving_objects[{k}] necesita una pose por cuadro.")
        for i in range(len(self.trajectory)):
            for cam in self.cameras():
                centro = self.camera_pose(i, cam)[:3, 3]
                for rect in self.primitives_at(i):
                    if rect.distance_to(centro) <= self.d_min:
                        raise ValueError(f"La cámara '{cam}' del cuadro {i} está a menos de d_min de una primitiva.")

    def __len__(self) -> int:
        return len(self.trajectory)

    def cameras(self) -> Tuple[str, ...]:
        return ("left", "right") if self.stereo_baseline else ("left",)

    def camera_pose(self, index: int, camera: str = "left") -> np.ndarray:
        if not 0 <= index < len(self.trajectory):
            raise IndexError(f"Cuadro {index} fuera de la trayectoria.")
        pose = np.asarray(self.trajectory[index], dtype=np.float64)
        if camera == "left":
            return pose
        if camera == "right" and self.stereo_baseline:
            return pose @ rigid(translation=(self.stereo_baseline, 0.0, 0.0))
        raise ValueError(f"Cámara desconocida '{camera}'.")

    def primitives_at(self, index: int) -> List[Rectangle]:
        rects = list(self.primitives)
        for obj in self.moving_objects:
            rects.extend(p.transformed(obj.poses[index]) for p in obj.primitives)
        return rects

    def moving_count(self) -> int:
        return sum(len(o.primitives) for o in self.moving_objects)


# ----------------------------------------------------------------------------
# Textura
# ----------------------------------------------------------------------------

def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (seed * 83492791)
    h = h.astype(np.uint64)
    h ^= h >> np.uint64(13)
    h *= np.uint64(0x5BD1E995)
    h ^= h >> np.uint64(15)
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0xFFFFFF)


def _value_noise(x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    sx = fx * fx * (3 - 2 * fx)
    sy = fy * fy * (3 - 2 * fy)
    v00 = _hash01(x0, y0, seed)
    v10 = _hash01(x0 + 1, y0, seed)
    v01 = _hash01(x0, y0 + 1, seed)
    v11 = _hash01(x0 + 1, y0 + 1, seed)
    return (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy


def texture(a: np.ndarray, b: np.ndarray, seed: int, footprint: Optional[np.ndarray] = None, cell: float = 2.0, octaves: int = 3) -> np.ndarray:
    """Ruido de valor en [0, 1] sobre coordenadas locales (m).

    Las octavas más finas que el tamaño del píxel en la superficie
    (`footprint`, m/píxel) se atenúan hacia su valor medio.
    """
    total = np.zeros_like(a)
    peso_total = 0.0
    amp = 1.0
    for o in range(octaves):
        celda = cell / 2**o
        ruido = _value_noise(a / celda, b / celda, seed * 31 + o)
        if footprint is not None:
            atenuacion = np.clip(celda / np.maximum(footprint, 1e-9) / 2.0 - 1.0, 0.0, 1.0)
            ruido = 0.5 + (ruido - 0.5) * atenuacion
        total += amp * ruido
        peso_total += amp
        amp *= 0.5
    return total / peso_total


def _color(a: np.ndarray, b: np.ndarray, seed: int, channels: int, footprint: Optional[np.ndarray]) -> np.ndarray:
    comun = texture(a, b, seed, footprint)
    if channels == 1:
        return (0.05 + 0.9 * comun)[None]
    return np.stack([0.05 + 0.9 * (0.6 * comun + 0.4 * texture(a, b, seed + 1000 * (c + 1), footprint)) for c in range(3)])


def quantize(image: np.ndarray) -> np.ndarray:
    """Cuantiza a 8 bits y vuelve a float32 como lo hace la lectura de disco."""
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return u8_to_float(u8)


def u8_to_float(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / np.float32(255)


# ----------------------------------------------------------------------------
# Trazado de rayos
# ----------------------------------------------------------------------------

def _intersect(origins: np.ndarray, dirs: np.ndarray, rects: Sequence[Rectangle]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Primer choque de cada rayo o = origins + s·dirs con s > 0.

    Returns:
        (s, índice de primitiva o -1, coordenada local a, coordenada local b).
    """
    m = dirs.shape[0]
    s_min = np.full(m, np.inf)
    idx = np.full(m, -1, dtype=np.int64)
    a_hit = np.zeros(m)
    b_hit = np.zeros(m)
    for k, rect in enumerate(rects):
        n = rect.normal
        c = np.asarray(rect.center)
        den = dirs @ n
        # Rayos paralelos dan s = inf y NaN en a, b; `ok` los descarta.
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((c - origins) @ n) / den
            punto = origins + s[:, None] * dirs
            rel = punto - c
            a = rel @ np.asarray(rect.axis_u)
            b = rel @ np.asarray(rect.axis_v)
            ok = (np.abs(den) > 1e-12) & (s > 1e-9) & (np.abs(a) <= rect.half_u) & (np.abs(b) <= rect.half_v) & (s < s_min)
        s_min = np.where(ok, s, s_min)
        idx = np.where(ok, k, idx)
        a_hit = np.where(ok, a, a_hit)
        b_hit = np.where(ok, b, b_hit)
    return s_min, idx, a_hit, b_hit


def _rayos_mundo(spec: SceneSpec, pose: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    K = spec.intrinsics
    v, u = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing="ij")
    rayos = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u, dtype=np.float64)], axis=-1).reshape(-1, 3)
    dirs = rayos @ pose[:3, :3].T
    origins = np.broadcast_to(pose[:3, 3], dirs.shape)
    return origins, dirs


@dataclass
class RenderedFrame:
    """Imagen (C, H, W) cuantizada, profundidad z exacta (H, W) e índice de primitiva (H, W)."""

    image: np.ndarray
    depth: np.ndarray
    hit: np.ndarray


def render(spec: SceneSpec, index: int, camera: str = "left") -> RenderedFrame:
    """Renderiza el cuadro `index` visto desde `camera`.

    Los rayos que escapan de la escena reciben `background_depth` y textura plana.
    """
    K = spec.intrinsics
    pose = spec.camera_pose(index, camera)
    rects = spec.primitives_at(index)
    origins, dirs = _rayos_mundo(spec, pose)
    s, idx, a, b = _intersect(origins, dirs, rects)

    imagen = np.full((spec.channels, dirs.shape[0]), spec.background_value)
    escapa = idx < 0
    f = min(K.fx, K.fy)
    for k, rect in enumerate(rects):
        sel = idx == k
        if not np.any(sel):
            continue
        coseno = np.abs(dirs[sel] @ rect.normal) / np.linalg.norm(dirs[sel], axis=1)
        huella = s[sel] / f / np.maximum(coseno, 0.05)
        imagen[:, sel] = _color(a[sel], b[sel], spec.seed * 1009 + rect.texture_seed, spec.channels, huella)

    # Con rayos de z = 1 en cámara, el parámetro s es la profundidad z.
    profundidad = np.where(escapa, spec.background_depth, s)
    return RenderedFrame(
        image=quantize(imagen.reshape(spec.channels, K.height, K.width)),
        depth=profundidad.reshape(K.height, K.width).astype(np.float32),
        hit=idx.reshape(K.height, K.width),
    )


def relative_pose(spec: SceneSpec, target_index: int, source_index: int, source_camera: str = "left", target_camera: str = "left") -> np.ndarray:
    """Pose 4x4 que lleva puntos de la cámara objetivo a la fuente: inv(T_w_src) @ T_w_tgt."""
    return invert_rigid(spec.camera_pose(source_index, source_camera)) @ spec.camera_pose(target_index, target_camera)


def visibility(spec: SceneSpec, target_index: int, source_index: int, source_camera: str = "left", frame: Optional[RenderedFrame] = None) -> np.ndarray:
    """Máscara (H, W) de píxeles del objetivo visibles desde la cámara fuente.

    Un píxel es visible si su punto 3D cae dentro de la imagen fuente y nada
    lo tapa en el rayo desde la fuente. Los píxeles de objetos móviles se
    marcan como no visibles.
    """
    K = spec.intrinsics
    frame = frame or render(spec, target_index)
    pose_t = spec.camera_pose(target_index)
    pose_s = spec.camera_pose(source_index, source_camera)
    origins, dirs = _rayos_mundo(spec, pose_t)
    puntos = origins + frame.depth.reshape(-1, 1).astype(np.float64) * dirs

    en_fuente = (puntos - pose_s[:3, 3]) @ pose_s[:3, :3]
    z = en_fuente[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * en_fuente[:, 0] / z + K.cx
        v = K.fy * en_fuente[:, 1] / z + K.cy
    dentro = (z > 1e-6) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)

    origen_s = np.broadcast_to(pose_s[:3, 3], puntos.shape)
    s, _, _, _ = _intersect(origen_s, puntos - origen_s, spec.primitives_at(source_index))
    libre = s >= 1.0 - 1e-6

    estatico = frame.hit.reshape(-1) < len(spec.primitives)
    return (dentro & libre & estatico).reshape(K.height, K.width)


# ----------------------------------------------------------------------------
# Escenas procedurales
# ----------------------------------------------------------------------------

def street_scene(
    seed: int = 0,
    frames: int = 20,
    width: int = 192,
    height: int = 64,
    speed: float = 0.5,
    stereo_baseline: Optional[float] = None,
    boxes: int = 6,
    comoving_box: bool = False,
    channels: int = 3,
) -> SceneSpec:
    """Calle con suelo, dos paredes, cajas a los lados y un fondo lejano.

    La cámara avanza en +z a `speed` m por cuadro con una leve guiñada.
    """
    if frames < 2:
        raise ValueError("frames debe ser >= 2.")
    rng = np.random.default_rng(seed)
    largo = frames * speed + 40.0
    ex, ey, ez = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    prims = [
        Rectangle((0.0, 1.5, largo / 2 - 5.0), ex, ez, 6.0, largo / 2 + 5.0, 1),
        Rectangle((-4.0, -0.5, largo / 2 - 5.0), ez, ey, largo / 2 + 5.0, 2.0, 2),
        Rectangle((4.0, -0.5, largo / 2 - 5.0), ez, ey, largo / 2 + 5.0, 2.0, 3),
        Rectangle((0.0, -0.5, largo), ex, ey, 6.0, 2.0, 4),
    ]
    for k in range(boxes):
        lado = -1.0 if k % 2 == 0 else 1.0
        tam = rng.uniform(0.8, 1.4, size=3)
        x = lado * rng.uniform(2.0, 3.2)
        z = rng.uniform(4.0, largo - 10.0)
        prims.extend(box((x, 1.5 - tam[1] / 2, z), tam, texture_seed=10 + k))

    trayectoria = [
        rigid((0.0, 0.03 * np.sin(0.1 * i), 0.0), (0.0, 0.0, i * speed)) for i in range(frames)
    ]
    moviles = []
    if comoving_box:
        desplazamiento = rigid(translation=(0.0, 0.6, 5.0))
        moviles.append(MovingObject(box((0.0, 0.0, 0.0), (1.2, 1.0, 1.0), texture_seed=99), [p @ desplazamiento for p in trayectoria]))

    return SceneSpec(
        seed=seed,
        primitives=prims,
        trajectory=trayectoria,
        intrinsics=CameraIntrinsics.kitti_like(width, height),
        stereo_baseline=stereo_baseline,
        moving_objects=moviles,
        channels=channels,
    )


def plane_scene(depth: float = 5.0, frames: int = 2, tx: float = 0.0, width: int = 192, height: int = 64, seed: int = 0) -> SceneSpec:
    """Plano fronto-paralelo a profundidad `depth`; la cámara se traslada `tx` en x por cuadro."""
    plano = Rectangle((0.0, 0.0, depth), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), 1e3, 1e3, 7)
    return SceneSpec(
        seed=seed,
        primitives=[plano],
        trajectory=[rigid(translation=(i * tx, 0.0, 0.0)) for i in range(frames)],
        intrinsics=CameraIntrinsics.kitti_like(width, height),
    )


def _vec3(datos: Mapping[str, Any], clave: str, ruta: str) -> Tuple[float, float, float]:
    valor = datos.get(clave)
    if not isinstance(valor, (list, tuple)) or len(valor) != 3:
        raise ValueError(f"{ruta}.{clave}: se esperaba una lista de 3 números.")
    return tuple(float(x) for x in valor)


def scene_from_dict(datos: Mapping[str, Any]) -> SceneSpec:
    """Construye una escena desde JSON.

    Dos formas: explícita (`primitives` + `trajectory`) o calle procedural
    (`seed`, `frames`, `width`, `height`, `speed`, `boxes`, `stereo_baseline`,
    `comoving`).

    Raises:
        ValueError: Con la ruta del campo inválido.
    """
    if not isinstance(datos, Mapping):
        raise ValueError("spec: se esperaba un objeto JSON.")
    if "primitives" not in datos:
        permitidos = {"seed", "frames", "width", "height", "speed", "boxes", "stereo_baseline", "comoving", "channels"}
        extra = set(datos) - permitidos
        if extra:
            raise ValueError(f"spec: campos desconocidos {sorted(extra)}.")
        try:
            return street_scene(
                seed=int(datos.get("seed", 0)),
                frames=int(datos.get("frames", 20)),
                width=int(datos.get("width", 192)),
                height=int(datos.get("height", 64)),
                speed=float(datos.get("speed", 0.5)),
                stereo_baseline=None if datos.get("stereo_baseline") is None else float(datos["stereo_baseline"]),
                boxes=int(datos.get("boxes", 6)),
                comoving_box=bool(datos.get("comoving", False)),
                channels=int(datos.get("channels", 3)),
            )
        except (TypeError, ValueError) as exc:
            raise ValueError(f"spec: {exc}") from exc

    prims: List[Rectangle] = []
    for i, p in enumerate(datos["primitives"]):
        ruta = f"spec.primitives[{i}]"
        tipo = p.get("type", "rect")
        try:
            if tipo == "box":
                prims.extend(box(_vec3(p, "center", ruta), _vec3(p, "size", ruta), int(p.get("texture_seed", i))))
            elif tipo == "rect":
                prims.append(
                    Rectangle(
                        _vec3(p, "center", ruta),
                        _vec3(p, "axis_u", ruta),
                        _vec3(p, "axis_v", ruta),
                        float(p["half_u"]),
                        float(p["half_v"]),
                        int(p.get("texture_seed", i)),
                    )
                )
            else:
                raise ValueError(f"{ruta}.type: tipo desconocido '{tipo}'.")
        except KeyError as exc:
            raise ValueError(f"{ruta}: falta el campo {exc}.") from exc

    trayectoria = []
    for i, t in enumerate(datos.get("trajectory", [])):
        ruta = f"spec.trajectory[{i}]"
        eje = _vec3(t, "axis_angle", ruta) if "axis_angle" in t else (0.0, 0.0, 0.0)
        trayectoria.append(rigid(eje, _vec3(t, "translation", ruta)))

    width, height = int(datos.get("width", 192)), int(datos.get("height", 64))
    return SceneSpec(
        seed=int(datos.get("seed", 0)),
        primitives=prims,
        trajectory=trayectoria,
        intrinsics=CameraIntrinsics.kitti_like(width, height),
        stereo_baseline=None if datos.get("stereo_baseline") is None else float(datos["stereo_baseline"]),
        channels=int(datos.get("channels", 3)),
    )


# ----------------------------------------------------------------------------
# Cuadros agrupados
# ----------------------------------------------------------------------------

@dataclass
class FrameBatch:
    """Objetivos y fuentes apilados (N, C, H, W) para un paso de optimización."""

    target: np.ndarray
    sources: Dict[str, np.ndarray]
    intrinsics: CameraIntrinsics
    stereo_baseline: Optional[float] = None

    @property
    def size(self) -> int:
        return self.target.shape[0]

    @classmethod
    def from_bundles(cls, bundles: Sequence["FrameBundle"], names: Sequence[str]) -> "FrameBatch":
        if not bundles:
            raise ValueError("Se requiere al menos un FrameBundle.")
        fuentes = {}
        for n in names:
            faltan = [b.index for b in bundles if b.source(n) is None]
            if faltan:
                raise ValueError(f"Los cuadros {faltan} no tienen la fuente '{n}'.")
            fuentes[n] = np.stack([b.source(n) for b in bundles])
        return cls(
            target=np.stack([b.target for b in bundles]),
            sources=fuentes,
            intrinsics=bundles[0].intrinsics,
            stereo_baseline=bundles[0].stereo_baseline,
        )


@dataclass
class FrameBundle:
    """Un objetivo con sus vecinos temporales y/o su par estéreo.

    Attributes:
        index: Índice del cuadro en la secuencia.
        target: Imagen (C, H, W) en [0, 1].
        intrinsics: Cámara.
        prev, next, stereo: Imágenes fuente opcionales.
        gt_depth: Profundidad (H, W) de verdad de terreno, opcional.
        gt_poses: {fuente: 4x4} objetivo -> fuente, opcional.
        visibility: {fuente: máscara (H, W)} de desoclusión; solo para pruebas.
        stereo_baseline: Separación estéreo conocida.
    """

    index: int
    target: np.ndarray
    intrinsics: CameraIntrinsics
    prev: Optional[np.ndarray] = None
    next: Optional[np.ndarray] = None
    stereo: Optional[np.ndarray] = None
    gt_depth: Optional[np.ndarray] = None
    gt_poses: Dict[str, np.ndarray] = field(default_factory=dict)
    visibility: Dict[str, np.ndarray] = field(default_factory=dict)
    stereo_baseline: Optional[float] = None

    def __post_init__(self) -> None:
        for nombre in SOURCE_NAMES:
            img = getattr(self, nombre)
            if img is not None and img.shape != self.target.shape:
                raise ValueError(f"La imagen '{nombre}' tiene forma {img.shape} y el objetivo {self.target.shape}.")
        if self.gt_depth is not None:
            if self.gt_depth.shape != self.target.shape[-2:]:
                raise ValueError("gt_depth no coincide con la resolución del objetivo.")
            if np.any(self.gt_depth <= 0):
                raise ValueError("gt_depth debe ser positiva.")

    def source(self, name: str) -> Optional[np.ndarray]:
        if name not in SOURCE_NAMES:
            raise KeyError(f"Fuente desconocida '{name}'.")
        return getattr(self, name)

    def available_sources(self) -> List[str]:
        return [n for n in SOURCE_NAMES if getattr(self, n) is not None]

    def to_batch(self, names: Sequence[str]) -> FrameBatch:
        return FrameBatch.from_bundles([self], names)


def build_bundles(
    images: Sequence[np.ndarray],
    intrinsics: CameraIntrinsics,
    depths: Optional[Sequence[np.ndarray]] = None,
    poses: Optional[Sequence[np.ndarray]] = None,
    right_images: Optional[Sequence[np.ndarray]] = None,
    right_poses: Optional[Sequence[np.ndarray]] = None,
    visibility_masks: Optional[Sequence[Dict[str, np.ndarray]]] = None,
    stereo_baseline: Optional[float] = None,
) -> List[FrameBundle]:
    """Arma los FrameBundle de una secuencia ordenada."""
    n = len(images)
    bundles = []
    for i in range(n):
        gt_poses: Dict[str, np.ndarray] = {}
        if poses is not None:
            if i > 0:
                gt_poses["prev"] = invert_rigid(poses[i - 1]) @ poses[i]
            if i + 1 < n:
                gt_poses["next"] = invert_rigid(poses[i + 1]) @ poses[i]
            if right_poses is not None:
                gt_poses["stereo"] = invert_rigid(right_poses[i]) @ poses[i]
        bundles.append(
            FrameBundle(
                index=i,
                target=images[i],
                intrinsics=intrinsics,
                prev=images[i - 1] if i > 0 else None,
                next=images[i + 1] if i + 1 < n else None,
                stereo=right_images[i] if right_images is not None else None,
                gt_depth=depths[i] if depths is not None else None,
                gt_poses=gt_poses,
                visibility=dict(visibility_masks[i]) if visibility_masks is not None else {},
                stereo_baseline=stereo_baseline,
            )
        )
    return bundles


def sequence_from_spec(spec: SceneSpec, with_visibility: bool = False) -> List[FrameBundle]:
    """Renderiza toda la secuencia en memoria."""
    izquierdos = [render(spec, i) for i in range(len(spec))]
    derechos = [render(spec, i, "right").image for i in range(len(spec))] if spec.stereo_baseline else None
    mascaras = None
    if with_visibility:
        mascaras = [visibility_masks_for(spec, i, izquierdos[i]) for i in range(len(spec))]
    return build_bundles(
        [f.image for f in izquierdos],
        spec.intrinsics,
        depths=[f.depth for f in izquierdos],
        poses=[spec.camera_pose(i) for i in range(len(spec))],
        right_images=derechos,
        right_poses=[spec.camera_pose(i, "right") for i in range(len(spec))] if spec.stereo_baseline else None,
        visibility_masks=mascaras,
        stereo_baseline=spec.stereo_baseline,
    )


def visibility_masks_for(spec: SceneSpec, index: int, frame: Optional[RenderedFrame] = None) -> Dict[str, np.ndarray]:
    mascaras = {}
    if index > 0:
        mascaras["prev"] = visibility(spec, index, index - 1, frame=frame)
    if index + 1 < len(spec):
        mascaras["next"] = visibility(spec, index, index + 1, frame=frame)
    if spec.stereo_baseline:
        mascaras["stereo"] = visibility(spec, index, index, "right", frame=frame)
    return mascaras


# ----------------------------------------------------------------------------
# Utilidades de secuencia
# ----------------------------------------------------------------------------

def split_of(seed: int, index: int) -> str:
    """Partición determinista: sha256("seed:index") mod 10 -> 0-7 train, 8 val, 9 test."""
    cubeta = int(hashlib.sha256(f"{seed}:{index}".encode("utf-8")).hexdigest(), 16) % 10
    if cubeta <= 7:
        return "train"
    return "val" if cubeta == 8 else "test"


def motion_statistic(bundle: FrameBundle) -> Optional[float]:
    """mean |I_t - I_{t-1}| (o contra I_{t+1} si no hay anterior); None sin vecinos."""
    vecino = bundle.prev if bundle.prev is not None else bundle.next
    if vecino is None:
        return None
    return float(np.mean(np.abs(bundle.target.astype(np.float64) - vecino)))


def filter_stationary(bundles: Sequence[FrameBundle], threshold: float = STATIONARY_THRESHOLD) -> List[FrameBundle]:
    """Descarta cuadros cuya diferencia media con su vecino es menor que `threshold`."""
    conservados = []
    for b in bundles:
        mov = motion_statistic(b)
        if mov is None or mov >= threshold:
            conservados.append(b)
    descartados = len(bundles) - len(conservados)
    if descartados:
        logger.info(f"Filtro estacionario: {descartados} de {len(bundles)} cuadros descartados.")
    return conservados
