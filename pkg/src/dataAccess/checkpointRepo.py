#!/usr/bin/python
# -*- coding: utf-8 -*-
"""
checkpointRepo.py

Persistencia binaria de checkpoints.

Formato:
    "ADPD" | u32 versión | u64 largo del manifiesto | manifiesto JSON | datos

El manifiesto (claves ordenadas, separadores compactos) lista cada tensor y
cada buffer como {group, name, shape, offset, nbytes, sha256}; los datos son
float32 little-endian en el orden del manifiesto.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from depthCore.autodiff import GROUP_NAMES
from depthCore.models import FORMAT_VERSION, Checkpoint

logger = logging.getLogger(__name__)

MAGIC = b"ADPD"
_CABECERA = struct.Struct("<4sIQ")
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    """Archivo de checkpoint inválido: magia, versión, largo o grupos."""


def _registros(bloques: Dict[str, Dict[str, np.ndarray]], offset: int, datos: List[bytes]) -> Tuple[List[Dict[str, Any]], int]:
    registros = []
    for grupo in GROUP_NAMES:
        for nombre in sorted(bloques.get(grupo, {})):
            crudo = np.ascontiguousarray(bloques[grupo][nombre], dtype=_DTYPE).tobytes()
            registros.append(
                {
                    "group": grupo,
                    "name": nombre,
                    "shape": list(np.shape(bloques[grupo][nombre])),
                    "offset": offset,
                    "nbytes": len(crudo),
                    "sha256": hashlib.sha256(crudo).hexdigest(),
                }
            )
            datos.append(crudo)
            offset += len(crudo)
    return registros, offset


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serializa el checkpoint; la misma entrada produce siempre los mismos bytes."""
    datos: List[bytes] = []
    tensores, offset = _registros(ckpt.groups, 0, datos)
    buffers, _ = _registros(ckpt.buffers, offset, datos)
    manifiesto = {
        "format_version": ckpt.format_version,
        "hyperparameters": ckpt.hyperparameters,
        "metadata": ckpt.metadata,
        "tensors": tensores,
        "buffers": buffers,
    }
    texto = json.dumps(manifiesto, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _CABECERA.pack(MAGIC, ckpt.format_version, len(texto)) + texto + b"".join(datos)


def _leer_bloque(registros: List[Dict[str, Any]], datos: bytes, tipo: str) -> Dict[str, Dict[str, np.ndarray]]:
    bloques: Dict[str, Dict[str, np.ndarray]] = {}
    for r in registros:
        try:
            grupo, nombre, forma = r["group"], r["name"], tuple(r["shape"])
            inicio, largo = int(r["offset"]), int(r["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"Registro de {tipo} mal formado: {r!r}") from exc
        if inicio < 0 or inicio + largo > len(datos):
            raise CheckpointError(f"{tipo} '{grupo}.{nombre}': el archivo está truncado.")
        if largo != int(np.prod(forma, dtype=np.int64)) * _DTYPE.itemsize:
            raise CheckpointError(f"{tipo} '{grupo}.{nombre}': nbytes no coincide con la forma {forma}.")
        crudo = datos[inicio:inicio + largo]
        if hashlib.sha256(crudo).hexdigest() != r.get("sha256"):
            raise CheckpointError(f"{tipo} '{grupo}.{nombre}': checksum inválido.")
        bloques.setdefault(grupo, {})[nombre] = np.frombuffer(crudo, dtype=_DTYPE).reshape(forma).astype(np.float32)
    return bloques


def checkpoint_from_bytes(contenido: bytes) -> Checkpoint:
    """Inverso de `checkpoint_bytes`.

    Raises:
        CheckpointError: Magia o versión distinta, largo corrupto, checksum o grupo faltante.
    """
    if len(contenido) < _CABECERA.size:
        raise CheckpointError("El archivo es demasiado corto para ser un checkpoint.")
    magia, version, largo = _CABECERA.unpack_from(contenido)
    if magia != MAGIC:
        raise CheckpointError(f"Versión de formato incompatible: número mágico {magia!r}, se esperaba {MAGIC!r}.")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Versión de formato {version} no soportada (se esperaba {FORMAT_VERSION}).")
    fin = _CABECERA.size + largo
    if fin > len(contenido):
        raise CheckpointError("Largo del manifiesto corrupto.")
    try:
        manifiesto = json.loads(contenido[_CABECERA.size:fin].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Manifiesto ilegible: {exc}") from exc

    datos = contenido[fin:]
    grupos = _leer_bloque(manifiesto.get("tensors", []), datos, "tensor")
    faltantes = [g for g in GROUP_NAMES if g not in grupos]
    if faltantes:
        raise CheckpointError(f"Faltan los grupos {faltantes} en el checkpoint.")
    buffers = _leer_bloque(manifiesto.get("buffers", []), datos, "buffer")
    try:
        return Checkpoint(
            format_version=int(manifiesto["format_version"]),
            hyperparameters=dict(manifiesto["hyperparameters"]),
            groups=grupos,
            buffers=buffers,
            metadata=dict(manifiesto.get("metadata", {})),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"Manifiesto incompleto: {exc}") from exc


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    logger.info(f"Checkpoint guardado en {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    ckpt = checkpoint_from_bytes(path.read_bytes())
    logger.info(f"Checkpoint cargado desde {path} ({ckpt.metadata.get('steps', 0)} pasos)")
    return ckpt
