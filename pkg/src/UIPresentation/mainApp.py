#!/usr/bin/python
# -*- coding: utf-8 -*-

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import pandas as pd

from dataAccess.checkpointRepo import CheckpointError, load_checkpoint, save_checkpoint
from dataAccess.sceneRepo import DatasetLayoutError, SceneRepo, read_depth_dir, write_predictions
from depthCore.adapt import (
    PRESETS,
    AblationConfig,
    AdaptConfig,
    ComponentMask,
    DivergenceError,
    TrainConfig,
    ablation_grid,
    best_config,
    run_frames,
    trace_frame,
    train,
)
from depthCore.metrics import DepthMetrics, EvalConfig, metrics_table, summary_frame
from depthCore.models import DepthRange, ModelConfig
from depthCore.scenes import scene_from_dict
from UIPresentation.graficador import Graficador

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4

RESOLVED_NAME = "config.resolved.json"
FLOAT_FORMAT = "%.8g"

# Valores por defecto de cada comando; None = obligatorio u opcional sin valor.
COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "synth": {"spec": None, "out": None, "seed": None, "jobs": 1},
    "train": {
        "data": None,
        "out": None,
        "epochs": 20,
        "lr": 1e-4,
        "batch_size": 4,
        "supervision": "mono",
        "resume": None,
        "seed": 0,
        "filter_stationary": True,
        "d_min": 0.1,
        "d_max": 100.0,
    },
    "adapt": {
        "ckpt": None,
        "data": None,
        "out": None,
        "mode": "instance",
        "steps": None,
        "lr": 0.1,
        "components": "depth_encoder+pose_encoder",
        "freeze_norm_stats": True,
        "supervision": "mono",
        "motion_threshold": 0.0,
        "split": None,
        "scaling": "median",
        "cap": 80.0,
        "crop": False,
        "jobs": 1,
        "html": False,
        "seed": 0,
    },
    "eval": {"pred": None, "gt": None, "out": None, "scaling": "median", "cap": 80.0, "floor": 1e-3, "crop": False, "factor": 1.0, "seed": 0},
    "ablate": {
        "ckpt": None,
        "data": None,
        "grid": None,
        "preset": "components",
        "out": None,
        "svg": False,
        "split": None,
        "steps": 10,
        "lr": 0.1,
        "supervision": "mono",
        "scaling": "median",
        "cap": 80.0,
        "crop": False,
        "jobs": 1,
        "seed": 0,
    },
}

REQUIRED = {
    "synth": ("spec", "out"),
    "train": ("data", "out"),
    "adapt": ("ckpt", "data", "out"),
    "eval": ("pred", "gt"),
    "ablate": ("ckpt", "data", "out"),
}


class ConfigError(ValueError):
    """Archivo de configuración, spec o grilla mal formados."""


def _leer_json(path: str, que: str) -> Any:
    try:
        texto = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"{que} '{path}' no existe.") from exc
    try:
        return json.loads(texto)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: línea {exc.lineno}, columna {exc.colno}: {exc.msg}") from exc


@dataclass
class RunConfig:
    """Configuración resuelta de un comando: defaults < archivo --config < ADAPTDEPTH_SEED < flags."""

    command: str
    settings: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, clave: str) -> Any:
        return self.settings[clave]

    @classmethod
    def resolve(
        cls,
        command: str,
        flags: Mapping[str, Any],
        config_path: Optional[str] = None,
        env: Optional[Mapping[str, str]] = None,
    ) -> "RunConfig":
        if command not in COMMAND_DEFAULTS:
            raise ConfigError(f"Comando desconocido '{command}'.")
        env = os.environ if env is None else env
        settings = dict(COMMAND_DEFAULTS[command])

        if config_path:
            archivo = _leer_json(config_path, "El archivo de configuración")
            if not isinstance(archivo, dict):
                raise ConfigError(f"{config_path}: se esperaba un objeto JSON.")
            archivo = dict(archivo)
            previo = archivo.pop("command", command)
            if previo != command:
                raise ConfigError(f"{config_path}: la configuración es del comando '{previo}', no de '{command}'.")
            desconocidas = sorted(set(archivo) - set(settings))
            if desconocidas:
                raise ConfigError(f"{config_path}: claves desconocidas {desconocidas}.")
            settings.update(archivo)

        semilla = env.get("ADAPTDEPTH_SEED")
        if semilla:
            try:
                settings["seed"] = int(semilla)
            except ValueError as exc:
                raise ConfigError(f"ADAPTDEPTH_SEED debe ser entero, se recibió '{semilla}'.") from exc

        for clave, valor in flags.items():
            if clave in settings and valor is not None:
                settings[clave] = valor

        faltantes = [c for c in REQUIRED[command] if settings.get(c) is None]
        if faltantes:
            raise ConfigError(f"Faltan parámetros obligatorios para '{command}': {faltantes}.")
        return cls(command, settings)

    def to_json(self) -> str:
        return json.dumps({"command": self.command, **self.settings}, sort_keys=True, indent=2) + "\n"

    def save(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / RESOLVED_NAME
        path.write_text(self.to_json(), encoding="utf-8")
        return path


class MainApp:
    """
    Controller Class.
    Resuelve la configuración de cada comando, coordina los módulos de lógica y datos y traduce los errores a códigos de salida.
    """

    def __init__(self, scene_repo: Optional[SceneRepo] = None, graficador: Optional[Graficador] = None):
        self.scene_repo = scene_repo or SceneRepo()
        self.graficador = graficador or Graficador()
        self.config: Optional[RunConfig] = None

    def run(self, command: str, flags: Mapping[str, Any], config_path: Optional[str] = None) -> int:
        """Ejecuta un comando y devuelve su código de salida."""
        try:
            self.config = RunConfig.resolve(command, flags, config_path)
            return getattr(self, f"cmd_{command}")(self.config)
        except (DatasetLayoutError, CheckpointError, OSError) as e:
            self.mostrar_error(f"Error de E/S: {e}")
            return EXIT_IO
        except DivergenceError as e:
            self.mostrar_error(str(e))
            return EXIT_DIVERGENCE
        except (ConfigError, ValueError, KeyError) as e:
            self.mostrar_error(f"Error de configuración: {e}")
            return EXIT_CONFIG

    def mostrar_error(self, msg: str) -> None:
        """Reporta el error en el log antes de devolver el código de salida."""
        logger.error(msg)

    # -- comandos -------------------------------------------------------

    def cmd_synth(self, cfg: RunConfig) -> int:
        datos = _leer_json(cfg["spec"], "La spec")
        if cfg["seed"] is not None and isinstance(datos, dict):
            datos["seed"] = int(cfg["seed"])
        try:
            spec = scene_from_dict(datos)
        except ValueError as exc:
            raise ConfigError(f"{cfg['spec']}: {exc}") from exc
        out = Path(cfg["out"])
        self.scene_repo.generate(spec, out, jobs=int(cfg["jobs"]))
        cfg.save(out)
        return EXIT_OK

    def cmd_train(self, cfg: RunConfig) -> int:
        entrenamiento = self.scene_repo.load(cfg["data"], bool(cfg["filter_stationary"]), split="train")
        validacion = self.scene_repo.load(cfg["data"], False, split="val")
        resume = load_checkpoint(cfg["resume"]) if cfg["resume"] else None
        if not entrenamiento and resume is None:
            raise ConfigError(f"{cfg['data']}: la partición de entrenamiento está vacía.")
        if resume is not None:
            model_config = ModelConfig.from_dict(resume.hyperparameters)
        else:
            K = entrenamiento[0].intrinsics
            model_config = ModelConfig(height=K.height, width=K.width, depth_range=DepthRange(float(cfg["d_min"]), float(cfg["d_max"])))
        train_cfg = TrainConfig(
            epochs=int(cfg["epochs"]),
            batch_size=int(cfg["batch_size"]),
            lr=float(cfg["lr"]),
            seed=int(cfg["seed"]),
            supervision=str(cfg["supervision"]),
        )
        ckpt = train(entrenamiento, train_cfg, model_config, validacion, resume)
        out = Path(cfg["out"])
        save_checkpoint(out, ckpt)
        cfg.save(out.parent)
        return EXIT_OK

    def _eval_config(self, cfg: RunConfig) -> EvalConfig:
        return EvalConfig(
            scaling=str(cfg["scaling"]),
            cap=float(cfg["cap"]),
            floor=float(cfg.settings.get("floor", 1e-3)),
            crop=bool(cfg["crop"]),
            factor=float(cfg.settings.get("factor", 1.0)),
        )

    def cmd_adapt(self, cfg: RunConfig) -> int:
        ckpt = load_checkpoint(cfg["ckpt"])
        bundles = self.scene_repo.load(cfg["data"], split=cfg["split"])
        if not bundles:
            raise ConfigError(f"{cfg['data']}: no hay cuadros para adaptar.")
        mode = str(cfg["mode"])
        adapt_cfg = AdaptConfig(
            mode=mode,
            steps=None if cfg["steps"] is None else int(cfg["steps"]),
            lr=float(cfg["lr"]),
            mask=ComponentMask.from_string(str(cfg["components"]), bool(cfg["freeze_norm_stats"])),
            supervision=str(cfg["supervision"]),
            motion_threshold=float(cfg["motion_threshold"]),
        )
        evaluacion = self._eval_config(cfg)
        resultados = run_frames(ckpt, bundles, adapt_cfg, evaluation=evaluacion, with_baseline=mode != "off", jobs=int(cfg["jobs"]))

        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_predictions(out, {r.frame_index: r.depth for r in resultados})
        trace_frame(resultados).to_csv(out / "trace.csv", index=False, float_format=FLOAT_FORMAT)

        con_gt = [r for r in resultados if r.metrics is not None]
        if con_gt:
            summary_frame(DepthMetrics.mean([r.metrics for r in con_gt])).to_csv(out / "metrics.csv", index=False, float_format=FLOAT_FORMAT)
            por_cuadro = metrics_table([(r.frame_index, r.metrics) for r in con_gt])
            estado = pd.DataFrame(
                {"frame": [r.frame_index for r in resultados], "steps_taken": [r.steps_taken for r in resultados], "diverged": [r.diverged for r in resultados]}
            )
            por_cuadro = por_cuadro.merge(estado, on="frame", how="left")
            por_cuadro.to_csv(out / "frames.csv", index=False, float_format=FLOAT_FORMAT)

            series = {"adaptado" if mode != "off" else "base": pd.Series({r.frame_index: r.metrics.abs_rel for r in con_gt})}
            if mode != "off":
                series["base"] = pd.Series({r.frame_index: r.baseline_metrics.abs_rel for r in con_gt if r.baseline_metrics})
            grafico = pd.DataFrame(series).sort_index()
            self.graficador.save_chart(grafico, out / "chart.svg")
            if cfg["html"]:
                self.graficador.save_timeline(grafico, out / "chart.html")
        cfg.save(out)

        segundos = sum(r.seconds for r in resultados) / len(resultados)
        logger.info(f"Adaptación terminada: {len(resultados)} cuadros, {segundos:.3f} s por imagen")
        divergentes = [r.frame_index for r in resultados if r.diverged]
        if divergentes:
            logger.warning(f"Cuadros con divergencia: {divergentes}")
            return EXIT_DIVERGENCE
        return EXIT_OK

    def cmd_eval(self, cfg: RunConfig) -> int:
        predicciones = read_depth_dir(cfg["pred"])
        verdades = read_depth_dir(cfg["gt"])
        faltantes = sorted(set(predicciones) - set(verdades))
        if faltantes:
            raise DatasetLayoutError(f"No hay verdad de terreno para los cuadros {faltantes}.")
        evaluacion = self._eval_config(cfg)
        por_cuadro = [(i, evaluacion.evaluate(predicciones[i], verdades[i])) for i in sorted(predicciones)]

        out = Path(cfg["out"]) if cfg["out"] else Path(cfg["pred"])
        out.mkdir(parents=True, exist_ok=True)
        summary_frame(DepthMetrics.mean([m for _, m in por_cuadro])).to_csv(out / "metrics.csv", index=False, float_format=FLOAT_FORMAT)
        metrics_table(por_cuadro).to_csv(out / "frames.csv", index=False, float_format=FLOAT_FORMAT)
        cfg.save(out)
        return EXIT_OK

    def _grilla(self, cfg: RunConfig) -> List[AblationConfig]:
        if not cfg["grid"]:
            preset = str(cfg["preset"])
            if preset not in PRESETS:
                raise ConfigError(f"preset debe ser uno de {sorted(PRESETS)}.")
            if preset in ("lr", "direct"):
                return PRESETS[preset](steps=int(cfg["steps"]))
            if preset == "steps":
                return PRESETS[preset](lr=float(cfg["lr"]))
            return PRESETS[preset](steps=int(cfg["steps"]), lr=float(cfg["lr"]))

        datos = _leer_json(cfg["grid"], "La grilla")
        filas = datos.get("configs") if isinstance(datos, dict) else datos
        if not isinstance(filas, list) or not filas:
            raise ConfigError(f"{cfg['grid']}: se esperaba una lista no vacía de configuraciones.")
        grilla = []
        for i, fila in enumerate(filas):
            if not isinstance(fila, dict):
                raise ConfigError(f"{cfg['grid']}: grid[{i}] debe ser un objeto.")
            try:
                grilla.append(AblationConfig.from_dict(fila))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{cfg['grid']}: grid[{i}]: {exc}") from exc
        return grilla

    def cmd_ablate(self, cfg: RunConfig) -> int:
        grilla = self._grilla(cfg)
        ckpt = load_checkpoint(cfg["ckpt"])
        bundles = self.scene_repo.load(cfg["data"], split=cfg["split"])
        if not bundles:
            raise ConfigError(f"{cfg['data']}: no hay cuadros para la ablación.")
        series: Dict[str, pd.Series] = {}
        tabla = ablation_grid(
            grilla,
            bundles,
            ckpt,
            evaluation=self._eval_config(cfg),
            supervision=str(cfg["supervision"]),
            jobs=int(cfg["jobs"]),
            series=series,
        )

        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        tabla.drop(columns=["seconds_per_image"]).to_csv(out, index=False, float_format=FLOAT_FORMAT)
        tabla[["label", "seconds_per_image"]].to_csv(out.with_name(f"{out.stem}_timing.csv"), index=False, float_format=FLOAT_FORMAT)
        if cfg["svg"] and series:
            grafico = pd.DataFrame({etiqueta: series[etiqueta] for etiqueta in tabla["label"] if etiqueta in series}).sort_index()
            self.graficador.save_chart(grafico, out.parent / "chart.svg", "Error absoluto por cuadro y configuración")
        cfg.save(out.parent)

        mejor = best_config(tabla)
        if mejor is not None:
            logger.info(f"Mejor configuración: '{mejor['label']}' con abs_rel {mejor['abs_rel']:.4f}")
        if tabla["diverged_frames"].sum() > 0 or (tabla["error"] != "").any():
            return EXIT_DIVERGENCE
        return EXIT_OK
