#!/usr/bin/python
# -*- coding: utf-8 -*-
"""
adapt.py

Entrenamiento auto-supervisado y adaptación en inferencia.

- `train`: Adam sobre los cuatro grupos, normalización con estadísticas de lote.
- `adapt_instance`: parte de los pesos base en cada cuadro, da `steps` pasos
  de SGD sobre los componentes de la máscara y predice; el checkpoint base no
  cambia nunca.
- `adapt_sequential`: los pesos adaptados persisten de un cuadro al siguiente;
  usa solo el par (t-1, t).
- `direct_optimize`: optimiza la profundidad y la pose de salida en lugar de
  los pesos.
- `ablation_grid`: tabla de métricas por configuración.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from depthCore.autodiff import (
    GROUP_NAMES,
    AdamState,
    NonFiniteError,
    ParameterGroup,
    Tensor,
    adam_step,
    backward,
    gradients,
    sgd_step,
)
from depthCore.geometry import pose_vec_to_pose, stereo_pose
from depthCore.losses import LossBreakdown, LossWeights, Predictions, total_loss
from depthCore.metrics import METRIC_COLUMNS, DepthMetrics, EvalConfig
from depthCore.models import AdaptDepthModel, Checkpoint, DepthRange, ModelConfig, disp_to_depth
from depthCore.scenes import FrameBatch, FrameBundle, motion_statistic

logger = logging.getLogger(__name__)

SUBCOMPONENTS = (
    "depth_encoder.first_layer",
    "depth_encoder.last_block",
    "pose_encoder.first_layer",
    "pose_encoder.last_block",
)
MASK_COMPONENTS = GROUP_NAMES + SUBCOMPONENTS
SUPERVISIONS = ("mono", "stereo", "mono+stereo")
MODES = ("instance", "sequential", "off")
DEFAULT_STEPS = {"instance": 50, "sequential": 5, "off": 0}

ABLATION_COLUMNS = (
    ["label", "components", "mode", "lr", "steps", "freeze_norm_stats"]
    + METRIC_COLUMNS
    + ["frames", "diverged_frames", "seconds_per_image", "error"]
)

Base = Union[Checkpoint, AdaptDepthModel]


class DivergenceError(RuntimeError):
    """Pérdida no finita durante el entrenamiento."""


# ----------------------------------------------------------------------------
# Configuración
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ComponentMask:
    """Subconjunto de componentes que recibe actualizaciones en inferencia.

    Attributes:
        components: Grupos completos o subcomponentes (`depth_encoder.first_layer`, ...).
        freeze_norm_stats: Si True, las estadísticas de normalización no cambian.
    """

    components: FrozenSet[str] = frozenset({"depth_encoder", "pose_encoder"})
    freeze_norm_stats: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "components", frozenset(self.components))
        desconocidos = self.components - set(MASK_COMPONENTS)
        if desconocidos:
            raise ValueError(f"Componentes desconocidos {sorted(desconocidos)}. Use {MASK_COMPONENTS}.")
        for sub in self.components & set(SUBCOMPONENTS):
            padre = sub.split(".")[0]
            if padre in self.components:
                raise ValueError(f"'{sub}' excluye a su grupo padre '{padre}' en la misma máscara.")

    @classmethod
    def from_string(cls, texto: str, freeze_norm_stats: bool = True) -> "ComponentMask":
        """Parsea "depth_encoder+pose_encoder"; acepta "none" y "all"."""
        limpio = (texto or "").strip().replace(",", "+")
        if limpio in ("", "none"):
            return cls(frozenset(), freeze_norm_stats)
        if limpio in ("all", "whole_network"):
            return cls(frozenset(GROUP_NAMES), freeze_norm_stats)
        return cls(frozenset(p.strip() for p in limpio.split("+") if p.strip()), freeze_norm_stats)

    def to_string(self) -> str:
        if not self.components:
            return "none"
        return "+".join(c for c in MASK_COMPONENTS if c in self.components)

    def groups(self) -> FrozenSet[str]:
        return frozenset(c.split(".")[0] for c in self.components)

    def resolve(self, model: AdaptDepthModel) -> List[ParameterGroup]:
        """Un ParameterGroup por grupo tocado, con la unión de sus tensores seleccionados."""
        nombres: Dict[str, List[str]] = {}
        for c in MASK_COMPONENTS:
            if c in self.components:
                vista = model.component(c)
                nombres.setdefault(vista.name, []).extend(vista.tensors)
        return [model.groups[g].subset(dict.fromkeys(n)) for g, n in nombres.items()]


@dataclass(frozen=True)
class AdaptConfig:
    """Configuración de la adaptación en inferencia.

    `steps=None` toma el valor por defecto del modo: instance 50, sequential 5.
    """

    mode: str = "instance"
    steps: Optional[int] = None
    lr: float = 0.1
    mask: ComponentMask = field(default_factory=ComponentMask)
    supervision: str = "mono"
    motion_threshold: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode debe ser uno de {MODES}.")
        supervision = "mono+stereo" if self.supervision == "ms" else self.supervision
        object.__setattr__(self, "supervision", supervision)
        if supervision not in SUPERVISIONS:
            raise ValueError(f"supervision debe ser uno de {SUPERVISIONS}.")
        if self.steps is None:
            object.__setattr__(self, "steps", DEFAULT_STEPS[self.mode])
        if self.steps < 0:
            raise ValueError("steps no puede ser negativo.")
        if self.mode != "off":
            if self.steps < 1:
                raise ValueError("steps debe ser >= 1 cuando la adaptación está activa.")
            if not self.mask.components:
                raise ValueError("La máscara no puede estar vacía cuando la adaptación está activa.")
        if self.lr <= 0:
            raise ValueError("lr debe ser positivo.")
        if self.motion_threshold < 0:
            raise ValueError("motion_threshold no puede ser negativo.")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    supervision: str = "mono"

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr debe ser positivo.")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs debe ser >= 0 y batch_size >= 1.")
        supervision = "mono+stereo" if self.supervision == "ms" else self.supervision
        if supervision not in SUPERVISIONS:
            raise ValueError(f"supervision debe ser uno de {SUPERVISIONS}.")
        object.__setattr__(self, "supervision", supervision)


@dataclass
class AdaptResult:
    depth: np.ndarray
    trace: List[LossBreakdown]
    diverged: bool = False
    steps_taken: int = 0
    seconds: float = 0.0


@dataclass
class FrameResult(AdaptResult):
    frame_index: int = 0
    metrics: Optional[DepthMetrics] = None
    baseline_metrics: Optional[DepthMetrics] = None


# ----------------------------------------------------------------------------
# Predicción
# ----------------------------------------------------------------------------

def _modelo(base: Base) -> AdaptDepthModel:
    if isinstance(base, Checkpoint):
        return AdaptDepthModel.from_checkpoint(base)
    return base.clone()


def _temporales(bundle: FrameBundle, mode: str) -> List[str]:
    if mode == "sequential":
        if bundle.prev is not None:
            return ["prev"]
        return ["next"] if bundle.next is not None else []
    return [n for n in ("prev", "next") if bundle.source(n) is not None]


def source_names(bundle: FrameBundle, mode: str, supervision: str) -> List[str]:
    """Fuentes usadas por la pérdida según el modo y la supervisión."""
    nombres = [] if supervision == "stereo" else _temporales(bundle, mode)
    if supervision in ("stereo", "mono+stereo"):
        if bundle.stereo is None or not bundle.stereo_baseline:
            raise ValueError(f"El cuadro {bundle.index} no tiene par estéreo.")
        nombres.append("stereo")
    return nombres


def _predicciones(model: AdaptDepthModel, lote: FrameBatch, nombres: Sequence[str]) -> Predictions:
    poses = {}
    for n in nombres:
        if n == "stereo":
            poses[n] = stereo_pose(lote.stereo_baseline, batch=lote.size)
        else:
            poses[n] = pose_vec_to_pose(model.pose_forward(lote.target, lote.sources[n]))
    return Predictions(disparities=model.depth_forward(lote.target), poses=poses)


def predict_depth(model: AdaptDepthModel, image: np.ndarray) -> np.ndarray:
    """Profundidad (H, W) de resolución completa con estadísticas de normalización acumuladas."""
    with model.no_grad(), model.eval_norm():
        disp = model.depth_forward(image)[0]
    return disp_to_depth(disp, model.config.depth_range).data[0, 0].copy()


def baseline_predictions(base: Base, bundle: FrameBundle, names: Sequence[str]) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Profundidad y vectores de pose (6,) del modelo sin adaptar."""
    model = base if isinstance(base, AdaptDepthModel) else AdaptDepthModel.from_checkpoint(base)
    profundidad = predict_depth(model, bundle.target)
    vectores = {}
    with model.no_grad(), model.eval_norm():
        for n in names:
            if n != "stereo":
                vectores[n] = model.pose_forward(bundle.target, bundle.source(n)).data[0].copy()
    return profundidad, vectores


# ----------------------------------------------------------------------------
# Núcleo de la adaptación
# ----------------------------------------------------------------------------

def _mascara_efectiva(cfg: AdaptConfig) -> ComponentMask:
    if cfg.supervision == "stereo" and cfg.mask.components != {"depth_encoder"}:
        logger.warning(
            f"Supervisión estéreo: la máscara '{cfg.mask.to_string()}' se reemplaza por 'depth_encoder'."
        )
        return ComponentMask(frozenset({"depth_encoder"}), cfg.mask.freeze_norm_stats)
    return cfg.mask


def _pesos_finitos(seleccion: Iterable[ParameterGroup]) -> bool:
    return all(np.all(np.isfinite(t.data)) for g in seleccion for _, t in g)


def _optimizar(
    model: AdaptDepthModel,
    bundle: FrameBundle,
    cfg: AdaptConfig,
    nombres: Sequence[str],
    weights: LossWeights,
) -> Tuple[List[LossBreakdown], bool, int]:
    """SGD sobre los tensores de la máscara, modificando `model` en sitio.

    Ante una pérdida no finita restaura los mejores pesos vistos.

    Returns:
        (traza, divergió, pasos dados).
    """
    mascara = _mascara_efectiva(cfg)
    seleccion = mascara.resolve(model)
    model.set_requires_grad(False)
    for grupo in seleccion:
        grupo.set_requires_grad(True)
    model.set_norm_frozen(True)
    grupos_norma = sorted({g.name for g in seleccion})
    if grupos_norma:
        model.set_norm_frozen(mascara.freeze_norm_stats, groups=grupos_norma)

    lote = bundle.to_batch(nombres)
    traza: List[LossBreakdown] = []
    mejor_perdida = math.inf
    mejor = ([g.snapshot() for g in seleccion], model.norm_state())
    divergio = False
    pasos = 0
    for paso in range(cfg.steps):
        try:
            desglose = total_loss(lote, _predicciones(model, lote, nombres), weights, model.config.depth_range)
            if not math.isfinite(desglose.total):
                raise NonFiniteError("Pérdida no finita.")
        except NonFiniteError as exc:
            logger.warning(f"Cuadro {bundle.index}: divergencia en el paso {paso} ({exc}); se restauran los mejores pesos.")
            divergio = True
            break
        traza.append(desglose)
        logger.debug(f"Cuadro {bundle.index} paso {paso}: pérdida {desglose.total:.6f}")
        if desglose.total < mejor_perdida:
            mejor_perdida = desglose.total
            mejor = ([g.snapshot() for g in seleccion], model.norm_state())
        grads = backward(desglose.loss, seleccion)
        for grupo in seleccion:
            sgd_step(grupo, grads[grupo.name], cfg.lr)
        pasos += 1

    if not divergio and not _pesos_finitos(seleccion):
        logger.warning(f"Cuadro {bundle.index}: pesos no finitos tras la adaptación; se restauran los mejores pesos.")
        divergio = True
    if divergio:
        for grupo, snap in zip(seleccion, mejor[0]):
            grupo.restore(snap)
        model.load_norm_state(mejor[1])
    model.set_requires_grad(False)
    model.set_norm_frozen(True)
    return traza, divergio, pasos


def _predecir_seguro(model: AdaptDepthModel, bundle: FrameBundle) -> Optional[np.ndarray]:
    try:
        return predict_depth(model, bundle.target)
    except NonFiniteError:
        return None


def _estacionario(bundle: FrameBundle, cfg: AdaptConfig) -> bool:
    if cfg.motion_threshold <= 0:
        return False
    mov = motion_statistic(bundle)
    if mov is not None and mov < cfg.motion_threshold:
        logger.warning(f"Cuadro {bundle.index}: movimiento {mov:.5f} bajo el umbral; se predice sin adaptar.")
        return True
    return False


def adapt_instance(
    base: Base,
    bundle: FrameBundle,
    cfg: AdaptConfig,
    weights: LossWeights = LossWeights(),
) -> AdaptResult:
    """Adapta una copia del modelo base a un único cuadro y devuelve la profundidad adaptada.

    Args:
        base: Checkpoint o modelo; nunca se modifica.
        bundle: Cuadro objetivo con sus fuentes.
        cfg: Configuración con mode = "instance" (u "off").
        weights: Pesos de la pérdida.
    """
    if cfg.mode == "sequential":
        raise ValueError("adapt_instance requiere mode 'instance' u 'off'.")
    inicio = time.perf_counter()
    model = _modelo(base)
    traza: List[LossBreakdown] = []
    divergio, pasos = False, 0

    nombres = source_names(bundle, "instance", cfg.supervision) if cfg.mode != "off" else []
    if cfg.mode != "off" and nombres and not _estacionario(bundle, cfg):
        snapshot_inicial = [g.snapshot() for g in model.groups.values()]
        traza, divergio, pasos = _optimizar(model, bundle, cfg, nombres, weights)
    else:
        snapshot_inicial = None

    profundidad = _predecir_seguro(model, bundle)
    if profundidad is None:
        divergio = True
        if snapshot_inicial is not None:
            for grupo, snap in zip(model.groups.values(), snapshot_inicial):
                grupo.restore(snap)
        profundidad = predict_depth(model, bundle.target)
    return AdaptResult(profundidad, traza, divergio, pasos, time.perf_counter() - inicio)


def _evaluar(bundle: FrameBundle, profundidad: np.ndarray, evaluacion: Optional[EvalConfig]) -> Optional[DepthMetrics]:
    if evaluacion is None or bundle.gt_depth is None:
        return None
    return evaluacion.evaluate(profundidad, bundle.gt_depth)


def adapt_sequential(
    base: Base,
    sequence: Sequence[FrameBundle],
    cfg: AdaptConfig,
    weights: LossWeights = LossWeights(),
    evaluation: Optional[EvalConfig] = EvalConfig(),
) -> Iterator[FrameResult]:
    """Adaptación continua sobre una secuencia ordenada; los pesos persisten entre cuadros.

    Cada cuadro usa solo su anterior (el primero, a falta de anterior, usa el
    siguiente). Se reporta la profundidad posterior a la actualización.
    """
    if cfg.mode != "sequential":
        raise ValueError("adapt_sequential requiere mode 'sequential'.")
    model = _modelo(base)
    for bundle in sequence:
        inicio = time.perf_counter()
        traza: List[LossBreakdown] = []
        divergio, pasos = False, 0
        nombres = source_names(bundle, "sequential", cfg.supervision)
        if nombres and not _estacionario(bundle, cfg):
            traza, divergio, pasos = _optimizar(model, bundle, cfg, nombres, weights)
        profundidad = _predecir_seguro(model, bundle)
        if profundidad is None:
            raise NonFiniteError(f"Cuadro {bundle.index}: la predicción no es finita ni con los mejores pesos.")
        resultado = FrameResult(
            depth=profundidad,
            trace=traza,
            diverged=divergio,
            steps_taken=pasos,
            seconds=time.perf_counter() - inicio,
            frame_index=bundle.index,
            metrics=_evaluar(bundle, profundidad, evaluation),
        )
        logger.info(
            f"Cuadro {bundle.index}: {pasos} pasos"
            + (f", abs_rel {resultado.metrics.abs_rel:.4f}" if resultado.metrics else "")
        )
        yield resultado


def direct_optimize(
    bundle: FrameBundle,
    depth: np.ndarray,
    poses: Mapping[str, np.ndarray],
    lr: float,
    steps: int,
    weights: LossWeights = LossWeights(),
    depth_range: DepthRange = DepthRange(),
    stereo: bool = False,
) -> AdaptResult:
    """Optimiza directamente la profundidad D y los vectores de pose; no toca pesos de red.

    D se recorta al rango de profundidad después de cada paso.

    Raises:
        NonFiniteError: Si la pérdida deja de ser finita.
    """
    if np.any(depth <= 0):
        raise ValueError("La profundidad inicial debe ser positiva.")
    if lr < 0 or steps < 0:
        raise ValueError("lr y steps no pueden ser negativos.")
    inicio = time.perf_counter()
    d = Tensor(np.asarray(depth)[None, None].copy(), requires_grad=True)
    vectores = {n: Tensor(np.asarray(v).reshape(1, 6).copy(), requires_grad=True) for n, v in poses.items()}
    nombres = list(vectores) + (["stereo"] if stereo else [])
    lote = bundle.to_batch(nombres)
    traza: List[LossBreakdown] = []
    for paso in range(steps):
        poses_pred = {n: pose_vec_to_pose(v) for n, v in vectores.items()}
        if stereo:
            poses_pred["stereo"] = stereo_pose(lote.stereo_baseline, batch=1)
        desglose = total_loss(lote, Predictions(depths=[d], poses=poses_pred), weights, depth_range)
        if not math.isfinite(desglose.total):
            raise NonFiniteError(f"Optimización directa: pérdida no finita en el paso {paso}.")
        traza.append(desglose)
        tensores = [d] + list(vectores.values())
        grads = gradients(desglose.loss, tensores)
        d.data = np.clip(d.data - lr * grads[0], depth_range.d_min, depth_range.d_max).astype(d.data.dtype)
        for v, g in zip(vectores.values(), grads[1:]):
            v.data = (v.data - lr * g).astype(v.data.dtype)
    return AdaptResult(d.data[0, 0].copy(), traza, False, steps, time.perf_counter() - inicio)


# ----------------------------------------------------------------------------
# Ejecución sobre secuencias
# ----------------------------------------------------------------------------

def run_frames(
    base: Base,
    bundles: Sequence[FrameBundle],
    cfg: AdaptConfig,
    weights: LossWeights = LossWeights(),
    evaluation: Optional[EvalConfig] = EvalConfig(),
    with_baseline: bool = False,
    jobs: int = 1,
) -> List[FrameResult]:
    """Ejecuta la adaptación configurada sobre todos los cuadros, en orden de índice.

    `jobs > 1` reparte la adaptación por instancia en hilos, cada uno con su
    propia copia del modelo.
    """
    if cfg.mode == "sequential":
        resultados = list(adapt_sequential(base, bundles, cfg, weights, evaluation))
    else:
        def _uno(bundle: FrameBundle) -> FrameResult:
            r = adapt_instance(base, bundle, cfg, weights)
            if cfg.mode == "instance":
                logger.info(f"Cuadro {bundle.index}: {r.steps_taken} pasos en {r.seconds:.2f} s")
            return FrameResult(
                depth=r.depth,
                trace=r.trace,
                diverged=r.diverged,
                steps_taken=r.steps_taken,
                seconds=r.seconds,
                frame_index=bundle.index,
                metrics=_evaluar(bundle, r.depth, evaluation),
            )

        if jobs > 1 and len(bundles) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                resultados = list(pool.map(_uno, bundles))
        else:
            resultados = [_uno(b) for b in bundles]

    if with_baseline and evaluation is not None:
        modelo_base = base if isinstance(base, AdaptDepthModel) else AdaptDepthModel.from_checkpoint(base)
        por_indice = {b.index: b for b in bundles}
        for r in resultados:
            b = por_indice[r.frame_index]
            if b.gt_depth is not None:
                r.baseline_metrics = evaluation.evaluate(predict_depth(modelo_base, b.target), b.gt_depth)
    return sorted(resultados, key=lambda r: r.frame_index)


def trace_frame(resultados: Sequence[FrameResult]) -> pd.DataFrame:
    """Traza CSV: frame_index, step, total, photometric, smoothness, mask_ratio, abs_rel."""
    filas = []
    for r in resultados:
        for paso, desglose in enumerate(r.trace):
            fila = {"frame_index": r.frame_index, **desglose.to_row(paso)}
            fila["abs_rel"] = r.metrics.abs_rel if r.metrics is not None else np.nan
            filas.append(fila)
    columnas = ["frame_index", "step", "total", "photometric", "smoothness", "mask_ratio", "abs_rel"]
    df = pd.DataFrame(filas, columns=columnas)
    if df["abs_rel"].isna().all():
        df = df.drop(columns=["abs_rel"])
    return df


# ----------------------------------------------------------------------------
# Entrenamiento
# ----------------------------------------------------------------------------

def _nombres_entrenamiento(supervision: str) -> List[str]:
    return {"mono": ["prev", "next"], "stereo": ["stereo"], "mono+stereo": ["prev", "next", "stereo"]}[supervision]


def validation_photometric(model: AdaptDepthModel, bundles: Sequence[FrameBundle], supervision: str = "mono", weights: LossWeights = LossWeights()) -> float:
    """Pérdida fotométrica media en modo evaluación, sin gradientes."""
    nombres = _nombres_entrenamiento(supervision)
    utiles = [b for b in bundles if all(b.source(n) is not None for n in nombres)]
    if not utiles:
        return float("nan")
    model.set_requires_grad(False)
    valores = []
    with model.eval_norm():
        for b in utiles:
            lote = b.to_batch(nombres)
            valores.append(total_loss(lote, _predicciones(model, lote, nombres), weights, model.config.depth_range).photometric)
    return float(np.mean(valores))


def train(
    dataset: Sequence[FrameBundle],
    cfg: TrainConfig,
    model_config: ModelConfig = ModelConfig(),
    val_bundles: Sequence[FrameBundle] = (),
    resume: Optional[Checkpoint] = None,
) -> Checkpoint:
    """Entrenamiento auto-supervisado con Adam sobre los cuatro grupos.

    Raises:
        DivergenceError: Si la pérdida deja de ser finita (indica época y paso).
    """
    nombres = _nombres_entrenamiento(cfg.supervision)
    utiles = [b for b in dataset if all(b.source(n) is not None for n in nombres)]
    if cfg.epochs > 0 and not utiles:
        raise ValueError(f"Ningún cuadro tiene las fuentes {nombres} requeridas para entrenar.")

    if resume is not None:
        model = AdaptDepthModel.from_checkpoint(resume)
        pasos = int(resume.metadata.get("steps", 0))
        epocas_previas = int(resume.metadata.get("epochs", 0))
    else:
        model = AdaptDepthModel(model_config, seed=cfg.seed)
        pasos, epocas_previas = 0, 0

    inicial = validation_photometric(model, val_bundles, cfg.supervision, cfg.weights)
    grupos = list(model.partition().values())
    estados = {g.name: AdamState() for g in grupos}
    rng = np.random.default_rng(cfg.seed + epocas_previas)

    model.set_trainable(GROUP_NAMES)
    for epoca in range(cfg.epochs):
        model.set_norm_frozen(False)
        model.set_requires_grad(True)
        orden = rng.permutation(len(utiles))
        perdidas = []
        logger.info(f"Época {epocas_previas + epoca + 1}: {len(utiles)} cuadros")
        for inicio in range(0, len(orden), cfg.batch_size):
            lote = FrameBatch.from_bundles([utiles[i] for i in orden[inicio:inicio + cfg.batch_size]], nombres)
            try:
                desglose = total_loss(lote, _predicciones(model, lote, nombres), cfg.weights, model.config.depth_range)
                if not math.isfinite(desglose.total):
                    raise NonFiniteError("Pérdida no finita.")
            except NonFiniteError as exc:
                raise DivergenceError(f"Divergencia en la época {epocas_previas + epoca + 1}, paso {pasos}: {exc}") from exc
            grads = backward(desglose.loss, grupos)
            for g in grupos:
                adam_step(g, grads[g.name], estados[g.name], cfg.lr)
            pasos += 1
            perdidas.append(desglose.total)
            logger.debug(f"Paso {pasos}: pérdida {desglose.total:.6f}")
        logger.info(f"Época {epocas_previas + epoca + 1} terminada: pérdida media {np.mean(perdidas):.6f}")

    model.set_requires_grad(False)
    model.set_norm_frozen(True)
    final = validation_photometric(model, val_bundles, cfg.supervision, cfg.weights) if cfg.epochs else inicial
    metadata = {
        "seed": cfg.seed,
        "steps": pasos,
        "epochs": epocas_previas + cfg.epochs,
        "supervision": cfg.supervision,
        "val_photometric_initial": None if math.isnan(inicial) else inicial,
        "val_photometric_final": None if math.isnan(final) else final,
    }
    return model.to_checkpoint(metadata)


# ----------------------------------------------------------------------------
# Ablaciones
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationConfig:
    """Una fila de la grilla de ablación; mode en {instance, sequential, direct, off}."""

    label: str
    mask: ComponentMask = field(default_factory=ComponentMask)
    lr: float = 0.1
    steps: int = 10
    mode: str = "instance"

    def __post_init__(self) -> None:
        if self.mode not in ("instance", "sequential", "direct", "off"):
            raise ValueError("mode debe ser instance, sequential, direct u off.")
        if self.steps < 0 or self.lr < 0:
            raise ValueError("steps y lr no pueden ser negativos.")

    @classmethod
    def from_dict(cls, datos: Mapping[str, Any]) -> "AblationConfig":
        mask = ComponentMask.from_string(str(datos.get("components", "depth_encoder+pose_encoder")), bool(datos.get("freeze_norm_stats", True)))
        return cls(
            label=str(datos.get("label", mask.to_string())),
            mask=mask,
            lr=float(datos.get("lr", 0.1)),
            steps=int(datos.get("steps", 10)),
            mode=str(datos.get("mode", "instance")),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "components": self.mask.to_string(),
            "lr": self.lr,
            "steps": self.steps,
            "mode": self.mode,
            "freeze_norm_stats": self.mask.freeze_norm_stats,
        }

    def adapt_config(self, supervision: str = "mono") -> AdaptConfig:
        if self.mode in ("off", "direct") or self.steps == 0:
            return AdaptConfig(mode="off", steps=0, lr=self.lr if self.lr > 0 else 0.1, mask=self.mask, supervision=supervision)
        return AdaptConfig(mode=self.mode, steps=self.steps, lr=self.lr, mask=self.mask, supervision=supervision)


def _direct_frames(base: Base, bundles: Sequence[FrameBundle], cfg: AblationConfig, weights: LossWeights, evaluation: EvalConfig, supervision: str) -> List[FrameResult]:
    model = base if isinstance(base, AdaptDepthModel) else AdaptDepthModel.from_checkpoint(base)
    resultados = []
    for b in bundles:
        nombres = source_names(b, "instance", supervision)
        profundidad, vectores = baseline_predictions(model, b, nombres)
        r = direct_optimize(b, profundidad, vectores, cfg.lr, cfg.steps, weights, model.config.depth_range, stereo="stereo" in nombres)
        resultados.append(
            FrameResult(r.depth, r.trace, False, r.steps_taken, r.seconds, frame_index=b.index, metrics=_evaluar(b, r.depth, evaluation))
        )
    return resultados


def ablation_grid(
    configs: Sequence[AblationConfig],
    dataset: Sequence[FrameBundle],
    base: Base,
    weights: LossWeights = LossWeights(),
    evaluation: EvalConfig = EvalConfig(),
    supervision: str = "mono",
    jobs: int = 1,
    series: Optional[Dict[str, pd.Series]] = None,
) -> pd.DataFrame:
    """Una fila por configuración con las 7 métricas medias; los fallos quedan en la columna `error`.

    Si se pasa `series`, se llena con el abs_rel por cuadro de cada etiqueta.
    """
    if not configs:
        raise ValueError("La grilla necesita al menos una configuración.")
    filas = []
    for cfg in configs:
        fila: Dict[str, Any] = {**cfg.to_dict(), "frames": 0, "diverged_frames": 0, "error": ""}
        fila.update({c: np.nan for c in METRIC_COLUMNS})
        inicio = time.perf_counter()
        try:
            if cfg.mode == "direct":
                resultados = _direct_frames(base, dataset, cfg, weights, evaluation, supervision)
            else:
                resultados = run_frames(base, dataset, cfg.adapt_config(supervision), weights, evaluation, jobs=jobs)
            metricas = [r.metrics for r in resultados if r.metrics is not None]
            if metricas:
                fila.update(DepthMetrics.mean(metricas).to_row())
            if series is not None:
                series[cfg.label] = pd.Series({r.frame_index: r.metrics.abs_rel for r in resultados if r.metrics is not None}, dtype=float)
            fila["frames"] = len(resultados)
            fila["diverged_frames"] = sum(r.diverged for r in resultados)
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            logger.error(f"Configuración '{cfg.label}' falló: {exc}")
            fila["error"] = str(exc)
        fila["seconds_per_image"] = (time.perf_counter() - inicio) / max(len(dataset), 1)
        logger.info(f"Configuración '{cfg.label}': abs_rel {fila['abs_rel']:.4f}")
        filas.append(fila)
    return pd.DataFrame(filas, columns=ABLATION_COLUMNS)


def best_config(table: pd.DataFrame) -> Optional[Dict[str, Any]]:
    """Fila con menor abs_rel, o None si ninguna tiene métricas."""
    validas = table.dropna(subset=["abs_rel"])
    if validas.empty:
        return None
    return validas.sort_values(by="abs_rel", ascending=True, kind="stable").iloc[0].to_dict()


def component_grid(steps: int = 10, lr: float = 0.1) -> List[AblationConfig]:
    """Línea base, las 15 combinaciones no vacías de grupos y las variantes por subcomponente."""
    grilla = [AblationConfig("baseline", ComponentMask(frozenset()), lr, 0, "off")]
    for k in range(1, 5):
        for combo in itertools.combinations(GROUP_NAMES, k):
            etiqueta = "whole_network" if k == 4 else "+".join(combo)
            grilla.append(AblationConfig(etiqueta, ComponentMask(frozenset(combo)), lr, steps))
    for sub in SUBCOMPONENTS:
        grilla.append(AblationConfig(sub, ComponentMask(frozenset({sub})), lr, steps))
    for sufijo in ("first_layer", "last_block"):
        par = frozenset({f"depth_encoder.{sufijo}", f"pose_encoder.{sufijo}"})
        grilla.append(AblationConfig(f"encoders.{sufijo}", ComponentMask(par), lr, steps))
    return grilla


def lr_grid(steps: int = 10, lrs: Sequence[float] = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)) -> List[AblationConfig]:
    grilla = [AblationConfig("baseline", ComponentMask(frozenset()), 0.1, 0, "off")]
    grilla.extend(AblationConfig(f"lr={lr:g}", ComponentMask(), lr, steps) for lr in lrs)
    return grilla


def steps_grid(lr: float = 0.1, steps: Sequence[int] = (5, 10, 25, 50, 75, 100, 150, 200)) -> List[AblationConfig]:
    grilla = [AblationConfig("baseline", ComponentMask(frozenset()), lr, 0, "off")]
    grilla.extend(AblationConfig(f"steps={s}", ComponentMask(), lr, s) for s in steps)
    return grilla


def direct_grid(steps: int = 10, lrs: Sequence[float] = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)) -> List[AblationConfig]:
    """Optimización directa de la salida para varios lr."""
    grilla = [AblationConfig("baseline", ComponentMask(frozenset()), 0.1, 0, "off")]
    grilla.extend(AblationConfig(f"direct lr={lr:g}", ComponentMask(), lr, steps, "direct") for lr in lrs)
    return grilla


PRESETS = {"components": component_grid, "lr": lr_grid, "steps": steps_grid, "direct": direct_grid}
