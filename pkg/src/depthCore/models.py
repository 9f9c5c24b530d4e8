#!/usr/bin/python
# -*- coding: utf-8 -*-
"""
models.py

Red de profundidad (encoder residual + decoder con conexiones de salto) y red
de pose, divididas en los cuatro grupos de parámetros que la adaptación en
inferencia puede habilitar por separado:

    depth_encoder, depth_decoder, pose_encoder, pose_decoder

Cada capa registra sus tensores entrenables en el grupo al que pertenece; las
estadísticas de normalización son estado aparte, no entrenable.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from depthCore.autodiff import (
    GROUP_NAMES,
    ParameterGroup,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    elu,
    matmul,
    mean,
    reflection_pad,
    relu,
    sigmoid,
    sqrt,
    upsample_nearest2x,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

# Normalización de entrada compartida por ambas redes.
_MEDIA_ENTRADA = 0.45
_DESV_ENTRADA = 0.225


@dataclass(frozen=True)
class DepthRange:
    """Rango de profundidad en unidades de escena."""

    d_min: float = 0.1
    d_max: float = 100.0

    def __post_init__(self) -> None:
        if not 0 < self.d_min < self.d_max:
            raise ValueError("Se requiere 0 < d_min < d_max.")


def disp_to_depth(disp: Tensor | np.ndarray, depth_range: DepthRange = DepthRange()) -> Tensor:
    """D = 1 / (a·σ + b), con a = 1/d_min - 1/d_max y b = 1/d_max.

    Raises:
        ValueError: Si σ sale de [0, 1].
    """
    disp = as_tensor(disp)
    if np.any(disp.data < 0.0) or np.any(disp.data > 1.0):
        raise ValueError("La disparidad debe estar en (0, 1).")
    a = 1.0 / depth_range.d_min - 1.0 / depth_range.d_max
    b = 1.0 / depth_range.d_max
    return 1.0 / (disp * a + b)


def depth_to_disp(depth: np.ndarray, depth_range: DepthRange = DepthRange()) -> np.ndarray:
    """Inversa de `disp_to_depth` en numpy."""
    a = 1.0 / depth_range.d_min - 1.0 / depth_range.d_max
    b = 1.0 / depth_range.d_max
    return (1.0 / np.asarray(depth) - b) / a


@dataclass
class ModelConfig:
    """Hiperparámetros de las redes.

    Attributes:
        height, width: Resolución de entrada, múltiplos de 16.
        encoder_widths: Canales de las 4 etapas del encoder.
        decoder_widths: Canales del decoder por nivel (0 = resolución completa).
        blocks_per_stage: Bloques residuales por etapa.
        scales: Número de mapas de disparidad de salida (1 a 4).
        depth_range: Rango usado por `disp_to_depth`.
        pose_scale: Factor aplicado a la salida de la red de pose.
    """

    height: int = 64
    width: int = 192
    encoder_widths: Tuple[int, int, int, int] = (16, 32, 64, 128)
    decoder_widths: Tuple[int, int, int, int] = (16, 16, 32, 64)
    blocks_per_stage: int = 2
    scales: int = 2
    depth_range: DepthRange = field(default_factory=DepthRange)
    pose_scale: float = 0.01

    def __post_init__(self) -> None:
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if isinstance(self.depth_range, Mapping):
            self.depth_range = DepthRange(**self.depth_range)
        if self.height % 16 or self.width % 16 or self.height <= 0 or self.width <= 0:
            raise ValueError("height y width deben ser múltiplos positivos de 16.")
        if len(self.encoder_widths) != 4 or len(self.decoder_widths) != 4:
            raise ValueError("Se requieren 4 anchos de encoder y 4 de decoder.")
        if min(self.encoder_widths + self.decoder_widths) <= 0:
            raise ValueError("Los anchos deben ser positivos.")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage debe ser >= 1.")
        if not 1 <= self.scales <= 4:
            raise ValueError("scales debe estar entre 1 y 4.")
        if self.pose_scale <= 0:
            raise ValueError("pose_scale debe ser positivo.")

    def to_dict(self) -> Dict[str, Any]:
        datos = asdict(self)
        datos["encoder_widths"] = list(self.encoder_widths)
        datos["decoder_widths"] = list(self.decoder_widths)
        return datos

    @classmethod
    def from_dict(cls, datos: Mapping[str, Any]) -> "ModelConfig":
        return cls(**dict(datos))


# ----------------------------------------------------------------------------
# Capas
# ----------------------------------------------------------------------------

class _Registro:
    """Asigna nombres únicos a los tensores de un grupo al construir las capas."""

    def __init__(self, grupo: ParameterGroup, rng: np.random.Generator, creados: List[Tensor]) -> None:
        self.grupo = grupo
        self.rng = rng
        self.creados = creados
        self.normas: List["BatchNorm2d"] = []

    def param(self, nombre: str, valor: np.ndarray) -> Tensor:
        if nombre in self.grupo.tensors:
            raise ValueError(f"Nombre de tensor repetido '{nombre}' en '{self.grupo.name}'.")
        t = Tensor(valor, requires_grad=False, name=f"{self.grupo.name}.{nombre}")
        self.grupo.tensors[nombre] = t
        self.creados.append(t)
        return t


class Conv2d:
    def __init__(
        self,
        reg: _Registro,
        nombre: str,
        entrada: int,
        salida: int,
        kernel: int = 3,
        stride: int = 1,
        bias: bool = True,
        reflect: bool = False,
    ) -> None:
        fan_in = entrada * kernel * kernel
        pesos = reg.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(salida, entrada, kernel, kernel))
        self.weight = reg.param(f"{nombre}.weight", pesos)
        self.bias = reg.param(f"{nombre}.bias", np.zeros(salida)) if bias else None
        self.stride = stride
        self.pad = kernel // 2
        self.reflect = reflect

    def __call__(self, x: Tensor) -> Tensor:
        # Mapas de 1 píxel no admiten reflexión; se rellenan con ceros.
        if self.reflect and self.pad and min(x.shape[-2:]) > self.pad:
            return conv2d(reflection_pad(x, self.pad), self.weight, self.bias, stride=self.stride)
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.pad)


class BatchNorm2d:
    """Normalización por lote con estadísticas acumuladas.

    Usa estadísticas del lote (y las actualiza) solo cuando su grupo no tiene
    `norm_stats_frozen`; en otro caso usa las acumuladas.
    """

    def __init__(self, reg: _Registro, nombre: str, canales: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        self.nombre = nombre
        self.grupo = reg.grupo
        self.gamma = reg.param(f"{nombre}.gamma", np.ones(canales))
        self.beta = reg.param(f"{nombre}.beta", np.zeros(canales))
        self.running_mean = np.zeros(canales, dtype=np.float32)
        self.running_var = np.ones(canales, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        reg.normas.append(self)

    def __call__(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        gamma = self.gamma.reshape(1, c, 1, 1)
        beta = self.beta.reshape(1, c, 1, 1)
        if self.grupo.norm_stats_frozen:
            inv = 1.0 / np.sqrt(self.running_var.astype(np.float64) + self.eps)
            centrado = x - self.running_mean.reshape(1, c, 1, 1)
            return centrado * (gamma * inv.reshape(1, c, 1, 1)) + beta

        media = mean(x, axis=(0, 2, 3), keepdims=True)
        centrado = x - media
        var = mean(centrado * centrado, axis=(0, 2, 3), keepdims=True)
        salida = centrado / sqrt(var + self.eps) * gamma + beta

        n = x.shape[0] * x.shape[2] * x.shape[3]
        insesgada = var.data.reshape(-1) * (n / max(n - 1, 1))
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * media.data.reshape(-1)).astype(np.float32)
        self.running_var = ((1 - m) * self.running_var + m * insesgada).astype(np.float32)
        return salida


class Linear:
    def __init__(self, reg: _Registro, nombre: str, entrada: int, salida: int) -> None:
        self.weight = reg.param(f"{nombre}.weight", reg.rng.normal(0.0, np.sqrt(1.0 / entrada), size=(entrada, salida)))
        self.bias = reg.param(f"{nombre}.bias", np.zeros(salida))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class ResidualBlock:
    """conv-bn-relu-conv-bn más atajo (proyección 1x1 si cambia la forma)."""

    def __init__(self, reg: _Registro, nombre: str, entrada: int, salida: int, stride: int) -> None:
        self.prefijo = nombre
        self.conv1 = Conv2d(reg, f"{nombre}.conv1", entrada, salida, 3, stride, bias=False)
        self.bn1 = BatchNorm2d(reg, f"{nombre}.bn1", salida)
        self.conv2 = Conv2d(reg, f"{nombre}.conv2", salida, salida, 3, 1, bias=False)
        self.bn2 = BatchNorm2d(reg, f"{nombre}.bn2", salida)
        self.proyeccion: Optional[Tuple[Conv2d, BatchNorm2d]] = None
        if stride != 1 or entrada != salida:
            self.proyeccion = (
                Conv2d(reg, f"{nombre}.shortcut.conv", entrada, salida, 1, stride, bias=False),
                BatchNorm2d(reg, f"{nombre}.shortcut.bn", salida),
            )

    def __call__(self, x: Tensor) -> Tensor:
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        atajo = x if self.proyeccion is None else self.proyeccion[1](self.proyeccion[0](x))
        return relu(y + atajo)


class ResNetEncoder:
    """Stem 3x3/2 + 4 etapas residuales (pasos 1, 2, 2, 2).

    Devuelve las salidas de las 4 etapas, a 1/2, 1/4, 1/8 y 1/16 de la entrada.
    """

    def __init__(self, reg: _Registro, entrada: int, anchos: Sequence[int], bloques: int) -> None:
        self.stem_conv = Conv2d(reg, "stem.conv", entrada, anchos[0], 3, 2, bias=False)
        self.stem_bn = BatchNorm2d(reg, "stem.bn", anchos[0])
        self.etapas: List[List[ResidualBlock]] = []
        previo = anchos[0]
        for k, (ancho, paso) in enumerate(zip(anchos, (1, 2, 2, 2)), start=1):
            etapa = []
            for j in range(bloques):
                etapa.append(ResidualBlock(reg, f"stage{k}.block{j}", previo, ancho, paso if j == 0 else 1))
                previo = ancho
            self.etapas.append(etapa)

    @property
    def first_layer(self) -> List[str]:
        return ["stem.conv.weight"]

    @property
    def last_block(self) -> str:
        return self.etapas[-1][-1].prefijo + "."

    def __call__(self, x: Tensor) -> List[Tensor]:
        x = relu(self.stem_bn(self.stem_conv(x)))
        features = []
        for etapa in self.etapas:
            for bloque in etapa:
                x = bloque(x)
            features.append(x)
        return features


class DepthDecoder:
    """Decoder con conexiones de salto y una cabeza sigmoide por escala."""

    def __init__(self, reg: _Registro, enc_anchos: Sequence[int], dec_anchos: Sequence[int], scales: int) -> None:
        self.scales = scales
        self.upconv0: Dict[int, Conv2d] = {}
        self.upconv1: Dict[int, Conv2d] = {}
        self.dispconv: Dict[int, Conv2d] = {}
        previo = enc_anchos[3]
        for i in range(3, -1, -1):
            self.upconv0[i] = Conv2d(reg, f"upconv{i}_0", previo, dec_anchos[i], 3, reflect=True)
            entrada = dec_anchos[i] + (enc_anchos[i - 1] if i > 0 else 0)
            self.upconv1[i] = Conv2d(reg, f"upconv{i}_1", entrada, dec_anchos[i], 3, reflect=True)
            previo = dec_anchos[i]
            if i < scales:
                self.dispconv[i] = Conv2d(reg, f"dispconv{i}", dec_anchos[i], 1, 3, reflect=True)

    def __call__(self, features: Sequence[Tensor]) -> List[Tensor]:
        x = features[3]
        salidas: Dict[int, Tensor] = {}
        for i in range(3, -1, -1):
            x = upsample_nearest2x(elu(self.upconv0[i](x)))
            if i > 0:
                x = concat([x, features[i - 1]], axis=1)
            x = elu(self.upconv1[i](x))
            if i in self.dispconv:
                salidas[i] = sigmoid(self.dispconv[i](x))
        return [salidas[i] for i in range(self.scales)]


class PoseDecoder:
    """Compresión 1x1, ReLU, promedio global y capa lineal a 6 valores."""

    def __init__(self, reg: _Registro, entrada: int, escala: float) -> None:
        self.squeeze = Conv2d(reg, "squeeze", entrada, max(entrada // 2, 1), 1)
        self.linear = Linear(reg, "pose", max(entrada // 2, 1), 6)
        self.escala = escala

    def pre_activation(self, features: Sequence[Tensor]) -> Tensor:
        x = relu(self.squeeze(features[-1]))
        return self.linear(mean(x, axis=(2, 3)))

    def __call__(self, features: Sequence[Tensor]) -> Tensor:
        return self.pre_activation(features) * self.escala


# ----------------------------------------------------------------------------
# Modelo completo
# ----------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Pesos y metadatos persistibles del modelo.

    Attributes:
        format_version: Versión del formato binario.
        hyperparameters: `ModelConfig.to_dict()`.
        groups: {grupo: {nombre: arreglo}} con los tensores entrenables.
        buffers: {grupo: {nombre: arreglo}} con las estadísticas de normalización.
        metadata: Semilla, pasos, épocas y pérdidas de validación.
    """

    format_version: int
    hyperparameters: Dict[str, Any]
    groups: Dict[str, Dict[str, np.ndarray]]
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if set(self.groups) != set(GROUP_NAMES):
            raise ValueError(f"El checkpoint debe tener exactamente los grupos {GROUP_NAMES}.")


class AdaptDepthModel:
    """Red de profundidad + red de pose con partición en cuatro grupos."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0) -> None:
        self.config = config
        rng = np.random.default_rng(seed)
        self.groups: Dict[str, ParameterGroup] = {n: ParameterGroup(n) for n in GROUP_NAMES}
        self._creados: List[Tensor] = []
        self._registros = {n: _Registro(self.groups[n], rng, self._creados) for n in GROUP_NAMES}

        ew, dw = config.encoder_widths, config.decoder_widths
        self.depth_encoder = ResNetEncoder(self._registros["depth_encoder"], 3, ew, config.blocks_per_stage)
        self.depth_decoder = DepthDecoder(self._registros["depth_decoder"], ew, dw, config.scales)
        self.pose_encoder = ResNetEncoder(self._registros["pose_encoder"], 6, ew, config.blocks_per_stage)
        self.pose_decoder = PoseDecoder(self._registros["pose_decoder"], ew[3], config.pose_scale)

    # -- inferencia -------------------------------------------------------

    def _check_input(self, image: Tensor) -> Tensor:
        image = as_tensor(image)
        if image.ndim == 3:
            image = image.reshape((1,) + image.shape)
        esperado = (3, self.config.height, self.config.width)
        if image.ndim != 4 or image.shape[1:] != esperado:
            raise ShapeError(f"Se esperaba una imagen (N, {esperado}), se recibió {image.shape}.")
        return image

    def depth_forward(self, image: Tensor | np.ndarray) -> List[Tensor]:
        """Disparidades sigmoides por escala, la de resolución completa primero."""
        x = self._check_input(image)
        x = (x - _MEDIA_ENTRADA) * (1.0 / _DESV_ENTRADA)
        return self.depth_decoder(self.depth_encoder(x))

    def pose_forward(self, target: Tensor | np.ndarray, source: Tensor | np.ndarray) -> Tensor:
        """Vector (N, 6) eje-ángulo + traslación que lleva la cámara objetivo a la fuente."""
        t = self._check_input(target)
        s = self._check_input(source)
        x = (concat([t, s], axis=1) - _MEDIA_ENTRADA) * (1.0 / _DESV_ENTRADA)
        return self.pose_decoder(self.pose_encoder(x))

    def pose_pre_activation(self, target: Tensor | np.ndarray, source: Tensor | np.ndarray) -> Tensor:
        t = self._check_input(target)
        s = self._check_input(source)
        x = (concat([t, s], axis=1) - _MEDIA_ENTRADA) * (1.0 / _DESV_ENTRADA)
        return self.pose_decoder.pre_activation(self.pose_encoder(x))

    # -- partición y estado ---------------------------------------------

    def partition(self) -> Dict[str, ParameterGroup]:
        """Los cuatro grupos; verifica que ningún tensor quede en dos o en ninguno."""
        vistos: Dict[int, str] = {}
        for nombre, grupo in self.groups.items():
            for tnombre, t in grupo.tensors.items():
                if id(t) in vistos:
                    raise RuntimeError(f"'{tnombre}' aparece en '{vistos[id(t)]}' y en '{nombre}'.")
                vistos[id(t)] = nombre
        for t in self._creados:
            if id(t) not in vistos:
                raise RuntimeError(f"Tensor sin grupo asignado: {t.name}.")
        return dict(self.groups)

    def group_of(self, tensor_name: str) -> str:
        """Grupo que contiene `tensor_name`.

        Acepta el nombre calificado (`depth_encoder.stem.conv.weight`) o el
        local cuando este no es ambiguo (`upconv1_1.weight`).
        """
        grupo, _, local = tensor_name.partition(".")
        if grupo in self.groups and local in self.groups[grupo].tensors:
            return grupo
        candidatos = [n for n, g in self.groups.items() if tensor_name in g.tensors]
        if len(candidatos) == 1:
            return candidatos[0]
        if candidatos:
            raise KeyError(f"'{tensor_name}' es ambiguo entre {candidatos}; use el nombre calificado.")
        raise KeyError(f"Tensor desconocido '{tensor_name}'.")

    def component(self, name: str) -> ParameterGroup:
        """Grupo o subcomponente (`depth_encoder.first_layer`, `pose_encoder.last_block`, ...)."""
        grupo, _, sub = name.partition(".")
        if grupo not in self.groups:
            raise KeyError(f"Componente desconocido '{name}'.")
        base = self.groups[grupo]
        if not sub:
            return base
        encoder = {"depth_encoder": self.depth_encoder, "pose_encoder": self.pose_encoder}.get(grupo)
        if encoder is None:
            raise KeyError(f"'{grupo}' no tiene subcomponentes.")
        if sub == "first_layer":
            return base.subset(encoder.first_layer)
        if sub == "last_block":
            return base.subset(n for n in base.tensors if n.startswith(encoder.last_block))
        raise KeyError(f"Subcomponente desconocido '{name}'.")

    def norm_state(self) -> Dict[str, Dict[str, np.ndarray]]:
        """Copia de las estadísticas acumuladas de normalización por grupo."""
        estado: Dict[str, Dict[str, np.ndarray]] = {}
        for nombre, reg in self._registros.items():
            estado[nombre] = {}
            for norma in reg.normas:
                estado[nombre][f"{norma.nombre}.running_mean"] = norma.running_mean.copy()
                estado[nombre][f"{norma.nombre}.running_var"] = norma.running_var.copy()
        return estado

    def load_norm_state(self, estado: Mapping[str, Mapping[str, np.ndarray]]) -> None:
        for nombre, reg in self._registros.items():
            buffers = estado.get(nombre, {})
            for norma in reg.normas:
                clave = f"{norma.nombre}.running_mean"
                if clave in buffers:
                    norma.running_mean = np.array(buffers[clave], dtype=np.float32, copy=True)
                    norma.running_var = np.array(buffers[f"{norma.nombre}.running_var"], dtype=np.float32, copy=True)

    def set_norm_frozen(self, frozen: bool, groups: Optional[Sequence[str]] = None) -> None:
        for nombre in groups or GROUP_NAMES:
            self.groups[nombre].norm_stats_frozen = frozen

    def set_trainable(self, groups: Sequence[str]) -> None:
        """Marca como entrenables solo los grupos indicados."""
        for nombre, grupo in self.groups.items():
            grupo.trainable = nombre in groups

    def set_requires_grad(self, flag: bool) -> None:
        for grupo in self.groups.values():
            grupo.set_requires_grad(flag)

    @contextmanager
    def eval_norm(self) -> Iterator[None]:
        """Usa estadísticas acumuladas en todas las capas de normalización."""
        previo = {n: g.norm_stats_frozen for n, g in self.groups.items()}
        self.set_norm_frozen(True)
        try:
            yield
        finally:
            for n, flag in previo.items():
                self.groups[n].norm_stats_frozen = flag

    @contextmanager
    def no_grad(self) -> Iterator[None]:
        """Desactiva requires_grad en todos los tensores y restaura cada bandera al salir."""
        previo = [(t, t.requires_grad) for g in self.groups.values() for _, t in g]
        self.set_requires_grad(False)
        try:
            yield
        finally:
            for t, flag in previo:
                t.requires_grad = flag

    def num_tensors(self) -> int:
        return sum(len(g) for g in self.groups.values())

    # -- persistencia -----------------------------------------------------

    def to_checkpoint(self, metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
        return Checkpoint(
            format_version=FORMAT_VERSION,
            hyperparameters=self.config.to_dict(),
            groups={n: {k: np.array(t.data, dtype=np.float32, copy=True) for k, t in g.tensors.items()} for n, g in self.groups.items()},
            buffers=self.norm_state(),
            metadata=dict(metadata or {}),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "AdaptDepthModel":
        """Reconstruye el modelo copiando los arreglos; el checkpoint nunca queda compartido."""
        modelo = cls(ModelConfig.from_dict(ckpt.hyperparameters), seed=int(ckpt.metadata.get("seed", 0)))
        for nombre, grupo in modelo.groups.items():
            arreglos = ckpt.groups[nombre]
            faltantes = set(grupo.tensors) - set(arreglos)
            if faltantes:
                raise ValueError(f"El checkpoint no trae {sorted(faltantes)} en '{nombre}'.")
            for tnombre, t in grupo.tensors.items():
                arr = arreglos[tnombre]
                if arr.shape != t.shape:
                    raise ShapeError(f"'{nombre}.{tnombre}': forma {arr.shape}, se esperaba {t.shape}.")
                t.data = np.array(arr, dtype=t.data.dtype, copy=True)
        modelo.load_norm_state(ckpt.buffers)
        return modelo

    def clone(self) -> "AdaptDepthModel":
        copia = AdaptDepthModel.from_checkpoint(self.to_checkpoint())
        for nombre, grupo in self.groups.items():
            copia.groups[nombre].trainable = grupo.trainable
            copia.groups[nombre].norm_stats_frozen = grupo.norm_stats_frozen
        return copia
