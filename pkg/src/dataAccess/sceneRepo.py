#!/usr/bin/python
# -*- coding: utf-8 -*-
"""
sceneRepo.py

Lectura y escritura de secuencias sintéticas en disco.

Estructura de un dataset:

    <dir>/frames/%06d.ppm|pgm      imágenes de la cámara izquierda, 8 bits
    <dir>/right/%06d.ppm|pgm       cámara derecha (solo escenas estéreo)
    <dir>/depth/%06d.f32           "DPTH", u32 W, u32 H, float32 LE por filas
    <dir>/masks/%06d_<fuente>.pgm  visibilidad respecto a prev/next/stereo
    <dir>/intrinsics.json
    <dir>/poses.csv                frame,tx,ty,tz,ax,ay,az (mundo desde cámara)
    <dir>/poses_right.csv          mismo esquema, cámara derecha
    <dir>/manifest.json            semilla, particiones, baseline estéreo
"""

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import cv2
import numpy as np
import pandas as pd

from depthCore.geometry import CameraIntrinsics, rotation_to_axis_angle
from depthCore.scenes import (
    STATIONARY_THRESHOLD,
    FrameBundle,
    SceneSpec,
    build_bundles,
    filter_stationary,
    render,
    rigid,
    split_of,
    u8_to_float,
    visibility_masks_for,
)

logger = logging.getLogger(__name__)

DEPTH_MAGIC = b"DPTH"
_CABECERA_PROF = struct.Struct("<4sII")
POSE_COLUMNS = ["frame", "tx", "ty", "tz", "ax", "ay", "az"]

PathLike = Union[str, Path]


class DatasetLayoutError(ValueError):
    """El directorio no respeta la estructura del dataset."""


# ----------------------------------------------------------------------------
# Archivos individuales
# ----------------------------------------------------------------------------

def write_depth(path: PathLike, depth: np.ndarray) -> None:
    h, w = depth.shape
    datos = np.ascontiguousarray(depth, dtype="<f4").tobytes()
    Path(path).write_bytes(_CABECERA_PROF.pack(DEPTH_MAGIC, w, h) + datos)


def read_depth(path: PathLike) -> np.ndarray:
    contenido = Path(path).read_bytes()
    if len(contenido) < _CABECERA_PROF.size:
        raise DatasetLayoutError(f"{path}: archivo de profundidad truncado.")
    magia, w, h = _CABECERA_PROF.unpack_from(contenido)
    if magia != DEPTH_MAGIC:
        raise DatasetLayoutError(f"{path}: cabecera de profundidad inválida.")
    cuerpo = contenido[_CABECERA_PROF.size:]
    if len(cuerpo) != 4 * w * h:
        raise DatasetLayoutError(f"{path}: se esperaban {w}x{h} valores.")
    return np.frombuffer(cuerpo, dtype="<f4").reshape(h, w).astype(np.float32)


def write_image(path: PathLike, image: np.ndarray) -> None:
    """Guarda una imagen (C, H, W) en [0, 1] como pgm/ppm de 8 bits."""
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if u8.shape[0] == 3:
        salida = cv2.cvtColor(np.transpose(u8, (1, 2, 0)), cv2.COLOR_RGB2BGR)
    else:
        salida = u8[0]
    if not cv2.imwrite(str(path), salida):
        raise OSError(f"No se pudo escribir {path}.")


def read_image(path: PathLike) -> np.ndarray:
    """Lee un pgm/ppm como (C, H, W) float32 en [0, 1]."""
    u8 = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if u8 is None:
        raise DatasetLayoutError(f"No se pudo leer la imagen {path}.")
    if u8.ndim == 2:
        return u8_to_float(u8[None])
    return u8_to_float(np.transpose(cv2.cvtColor(u8, cv2.COLOR_BGR2RGB), (2, 0, 1)))


def write_mask(path: PathLike, mask: np.ndarray) -> None:
    if not cv2.imwrite(str(path), np.where(mask, 255, 0).astype(np.uint8)):
        raise OSError(f"No se pudo escribir {path}.")


def read_mask(path: PathLike) -> np.ndarray:
    u8 = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if u8 is None:
        raise DatasetLayoutError(f"No se pudo leer la máscara {path}.")
    return u8 > 127


def poses_frame(poses: List[np.ndarray]) -> pd.DataFrame:
    filas = []
    for i, m in enumerate(poses):
        eje = rotation_to_axis_angle(m[:3, :3])
        filas.append([i, *m[:3, 3], *eje])
    df = pd.DataFrame(filas, columns=POSE_COLUMNS)
    df["frame"] = df["frame"].astype(int)
    return df


def read_poses(path: PathLike) -> List[np.ndarray]:
    df = pd.read_csv(path)
    if list(df.columns) != POSE_COLUMNS:
        raise DatasetLayoutError(f"{path}: columnas {list(df.columns)}, se esperaba {POSE_COLUMNS}.")
    df = df.sort_values("frame")
    return [rigid(f[["ax", "ay", "az"]].to_numpy(float), f[["tx", "ty", "tz"]].to_numpy(float)) for _, f in df.iterrows()]


# ----------------------------------------------------------------------------
# Repositorio
# ----------------------------------------------------------------------------

class SceneRepo:
    """
    Servicio con estado.
    Genera datasets a partir de un SceneSpec y carga secuencias con caché en memoria.
    """

    def __init__(self):
        self.cache_secuencias: Dict[Tuple[str, bool, Optional[str], float], List[FrameBundle]] = {}

    def generate(self, spec: SceneSpec, out_dir: PathLike, jobs: int = 1) -> Dict[str, Any]:
        """Renderiza y escribe toda la secuencia; devuelve el manifiesto."""
        out = Path(out_dir)
        ext = "ppm" if spec.channels == 3 else "pgm"
        carpetas = ["frames", "depth", "masks"] + (["right"] if spec.stereo_baseline else [])
        for carpeta in carpetas:
            (out / carpeta).mkdir(parents=True, exist_ok=True)

        def _render(i: int):
            izquierdo = render(spec, i)
            derecho = render(spec, i, "right") if spec.stereo_baseline else None
            return izquierdo, derecho, visibility_masks_for(spec, i, izquierdo)

        indices = range(len(spec))
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                cuadros = list(pool.map(_render, indices))
        else:
            cuadros = [_render(i) for i in indices]

        for i, (izquierdo, derecho, mascaras) in enumerate(cuadros):
            write_image(out / "frames" / f"{i:06d}.{ext}", izquierdo.image)
            write_depth(out / "depth" / f"{i:06d}.f32", izquierdo.depth)
            if derecho is not None:
                write_image(out / "right" / f"{i:06d}.{ext}", derecho.image)
            for fuente, mascara in mascaras.items():
                write_mask(out / "masks" / f"{i:06d}_{fuente}.pgm", mascara)

        (out / "intrinsics.json").write_text(spec.intrinsics.to_json(), encoding="utf-8")
        poses_frame([spec.camera_pose(i) for i in indices]).to_csv(out / "poses.csv", index=False, float_format="%.10g")
        if spec.stereo_baseline:
            poses_frame([spec.camera_pose(i, "right") for i in indices]).to_csv(
                out / "poses_right.csv", index=False, float_format="%.10g"
            )

        particiones: Dict[str, List[int]] = {"train": [], "val": [], "test": []}
        for i in indices:
            particiones[split_of(spec.seed, i)].append(i)
        manifiesto = {
            "seed": spec.seed,
            "frames": len(spec),
            "channels": spec.channels,
            "extension": ext,
            "stereo_baseline": spec.stereo_baseline,
            "splits": particiones,
        }
        (out / "manifest.json").write_text(json.dumps(manifiesto, sort_keys=True, indent=2), encoding="utf-8")
        self.cache_secuencias = {k: v for k, v in self.cache_secuencias.items() if k[0] != str(out.resolve())}
        logger.info(f"Dataset de {len(spec)} cuadros escrito en {out}")
        return manifiesto

    def load(
        self,
        data_dir: PathLike,
        filter_stationary_frames: bool = False,
        split: Optional[str] = None,
        threshold: float = STATIONARY_THRESHOLD,
    ) -> List[FrameBundle]:
        """Carga los FrameBundle en orden de cuadro.

        Raises:
            DatasetLayoutError: Estructura incompleta o resolución distinta a la de los intrínsecos.
        """
        raiz = Path(data_dir)
        clave = (str(raiz.resolve()), filter_stationary_frames, split, threshold)
        if clave in self.cache_secuencias:
            logger.info("Usando caché de secuencias")
            return self.cache_secuencias[clave]

        manifiesto = self._manifiesto(raiz)
        try:
            K = CameraIntrinsics.from_json((raiz / "intrinsics.json").read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DatasetLayoutError(f"{raiz}: falta intrinsics.json.") from exc
        except (ValueError, TypeError) as exc:
            raise DatasetLayoutError(f"{raiz}/intrinsics.json inválido: {exc}") from exc

        archivos = sorted(p for p in (raiz / "frames").glob("*") if p.suffix in (".ppm", ".pgm"))
        if not archivos:
            raise DatasetLayoutError(f"{raiz}/frames no contiene imágenes.")
        imagenes = [self._imagen(p, K) for p in archivos]
        n = len(imagenes)

        rutas_prof = [raiz / "depth" / f"{p.stem}.f32" for p in archivos]
        profundidades = None
        if all(r.exists() for r in rutas_prof):
            profundidades = [read_depth(r) for r in rutas_prof]
            if any(d.shape != (K.height, K.width) for d in profundidades):
                raise DatasetLayoutError(f"{raiz}/depth no coincide con la resolución {K.width}x{K.height}.")

        poses = read_poses(raiz / "poses.csv") if (raiz / "poses.csv").exists() else None
        derechas, poses_der = None, None
        if (raiz / "right").is_dir():
            derechas = [self._imagen(raiz / "right" / p.name, K) for p in archivos]
            if (raiz / "poses_right.csv").exists():
                poses_der = read_poses(raiz / "poses_right.csv")
        if poses is not None and len(poses) != n:
            raise DatasetLayoutError(f"poses.csv tiene {len(poses)} filas y hay {n} cuadros.")

        mascaras = []
        for p in archivos:
            mascaras.append(
                {m.stem.split("_", 1)[1]: read_mask(m) for m in sorted((raiz / "masks").glob(f"{p.stem}_*.pgm"))}
            )

        bundles = build_bundles(
            imagenes,
            K,
            depths=profundidades,
            poses=poses,
            right_images=derechas,
            right_poses=poses_der,
            visibility_masks=mascaras,
            stereo_baseline=manifiesto.get("stereo_baseline"),
        )
        if split is not None:
            elegidos = set(manifiesto.get("splits", {}).get(split, []))
            bundles = [b for b in bundles if b.index in elegidos]
        if filter_stationary_frames:
            bundles = filter_stationary(bundles, threshold)

        self.cache_secuencias[clave] = bundles
        logger.info(f"Secuencia cargada desde {raiz}: {len(bundles)} cuadros")
        return bundles

    def force_update(self):
        """Limpia el caché para obligar a releer de disco."""
        self.cache_secuencias = {}

    @staticmethod
    def _manifiesto(raiz: Path) -> Dict[str, Any]:
        ruta = raiz / "manifest.json"
        if not ruta.exists():
            raise DatasetLayoutError(f"{raiz}: falta manifest.json.")
        try:
            return json.loads(ruta.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DatasetLayoutError(f"{ruta}: línea {exc.lineno}, columna {exc.colno}: {exc.msg}") from exc

    @staticmethod
    def _imagen(ruta: Path, K: CameraIntrinsics) -> np.ndarray:
        img = read_image(ruta)
        if img.shape[1:] != (K.height, K.width):
            raise DatasetLayoutError(f"{ruta}: resolución {img.shape[2]}x{img.shape[1]}, se esperaba {K.width}x{K.height}.")
        return img


_REPO = SceneRepo()


def generate_dataset(spec: SceneSpec, out_dir: PathLike, jobs: int = 1) -> Dict[str, Any]:
    return _REPO.generate(spec, out_dir, jobs)


def load_sequence(
    data_dir: PathLike,
    filter_stationary_frames: bool = False,
    split: Optional[str] = None,
    threshold: float = STATIONARY_THRESHOLD,
) -> List[FrameBundle]:
    return _REPO.load(data_dir, filter_stationary_frames, split, threshold)


def write_predictions(out_dir: PathLike, depths: Dict[int, np.ndarray]) -> Path:
    """Escribe `depth/%06d.f32` por cuadro bajo `out_dir`."""
    carpeta = Path(out_dir) / "depth"
    carpeta.mkdir(parents=True, exist_ok=True)
    for indice, d in sorted(depths.items()):
        write_depth(carpeta / f"{indice:06d}.f32", d)
    return carpeta


def read_depth_dir(data_dir: PathLike) -> Dict[int, np.ndarray]:
    """Lee todos los `.f32` de `<dir>/depth` (o de `<dir>` si no hay subcarpeta)."""
    raiz = Path(data_dir)
    carpeta = raiz / "depth" if (raiz / "depth").is_dir() else raiz
    archivos = sorted(carpeta.glob("*.f32"))
    if not archivos:
        raise DatasetLayoutError(f"{carpeta} no contiene mapas de profundidad .f32.")
    try:
        return {int(p.stem): read_depth(p) for p in archivos}
    except ValueError as exc:
        if isinstance(exc, DatasetLayoutError):
            raise
        raise DatasetLayoutError(f"{carpeta}: nombres de archivo no numéricos.") from exc
