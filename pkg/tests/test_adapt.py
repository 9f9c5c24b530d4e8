# -*- coding: utf-8 -*-
import logging

import numpy as np
import pandas as pd
import pytest

import depthCore.adapt as adapt
from depthCore.adapt import (
    DEFAULT_STEPS,
    AblationConfig,
    AdaptConfig,
    ComponentMask,
    TrainConfig,
    ablation_grid,
    adapt_instance,
    adapt_sequential,
    baseline_predictions,
    best_config,
    component_grid,
    direct_optimize,
    predict_depth,
    run_frames,
    source_names,
    trace_frame,
    train,
)
from depthCore.autodiff import GROUP_NAMES, NonFiniteError
from depthCore.losses import LossWeights
from depthCore.metrics import EvalConfig
from depthCore.models import AdaptDepthModel
from depthCore.scenes import sequence_from_spec


def _copia(ckpt):
    return {g: {n: a.copy() for n, a in t.items()} for g, t in ckpt.groups.items()}


def _iguales(a, b):
    return all(np.array_equal(a[g][n], b[g][n]) for g in a for n in a[g])


# ----------------------------------------------------------------------------
# Máscaras y configuración
# ----------------------------------------------------------------------------

def test_component_mask_parsing():
    m = ComponentMask.from_string("pose_encoder+depth_encoder")
    assert m.components == {"depth_encoder", "pose_encoder"}
    assert m.to_string() == "depth_encoder+pose_encoder"
    assert ComponentMask.from_string("depth_decoder,pose_decoder").groups() == {"depth_decoder", "pose_decoder"}
    assert ComponentMask.from_string("all").components == set(GROUP_NAMES)
    assert ComponentMask.from_string("none").to_string() == "none"
    with pytest.raises(ValueError):
        ComponentMask.from_string("depth_encoder+decoder")
    with pytest.raises(ValueError):
        ComponentMask.from_string("depth_encoder+depth_encoder.first_layer")


def test_component_mask_resolves_to_model_tensors(tiny_model):
    mask = ComponentMask.from_string("depth_encoder.first_layer+pose_decoder")
    grupos = {g.name: g for g in mask.resolve(tiny_model)}
    assert set(grupos) == {"depth_encoder", "pose_decoder"}
    assert list(grupos["depth_encoder"].tensors) == ["stem.conv.weight"]
    assert len(grupos["pose_decoder"]) == len(tiny_model.groups["pose_decoder"])


def test_adapt_config_defaults_and_validation():
    assert AdaptConfig().steps == 50
    assert AdaptConfig(mode="sequential").steps == 5
    assert DEFAULT_STEPS["instance"] == 10 * DEFAULT_STEPS["sequential"]
    assert AdaptConfig(supervision="ms").supervision == "mono+stereo"
    assert AdaptConfig(mode="off", mask=ComponentMask(frozenset())).steps == 0
    with pytest.raises(ValueError):
        AdaptConfig(mask=ComponentMask(frozenset()))
    with pytest.raises(ValueError):
        AdaptConfig(steps=0)
    with pytest.raises(ValueError):
        AdaptConfig(lr=0.0)
    with pytest.raises(ValueError):
        AdaptConfig(mode="online")
    with pytest.raises(ValueError):
        TrainConfig(supervision="lidar")


def test_source_names_per_mode_and_supervision(tiny_bundles, stereo_scene):
    assert source_names(tiny_bundles[1], "instance", "mono") == ["prev", "next"]
    assert source_names(tiny_bundles[1], "sequential", "mono") == ["prev"]
    assert source_names(tiny_bundles[0], "sequential", "mono") == ["next"]
    with pytest.raises(ValueError):
        source_names(tiny_bundles[1], "instance", "stereo")
    estereo = sequence_from_spec(stereo_scene)
    assert source_names(estereo[0], "instance", "stereo") == ["stereo"]
    assert source_names(estereo[1], "instance", "mono+stereo") == ["prev", "next", "stereo"]


# ----------------------------------------------------------------------------
# Adaptación por instancia
# ----------------------------------------------------------------------------

def test_instance_adaptation_never_touches_the_base(tiny_checkpoint, tiny_bundles):
    antes = _copia(tiny_checkpoint)
    r = adapt_instance(tiny_checkpoint, tiny_bundles[1], AdaptConfig(steps=2, lr=0.05))
    assert r.steps_taken == 2 and len(r.trace) == 2
    assert r.depth.shape == (32, 64) and np.all(np.isfinite(r.depth))
    assert _iguales(antes, _copia(tiny_checkpoint))


def test_instance_adaptation_starts_from_base_every_frame(tiny_checkpoint, tiny_bundles):
    cfg = AdaptConfig(steps=1, lr=0.05)
    a = adapt_instance(tiny_checkpoint, tiny_bundles[1], cfg)
    adapt_instance(tiny_checkpoint, tiny_bundles[2], cfg)
    b = adapt_instance(tiny_checkpoint, tiny_bundles[1], cfg)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_off_mode_equals_baseline(tiny_checkpoint, tiny_bundles):
    b = tiny_bundles[2]
    r = adapt_instance(tiny_checkpoint, b, AdaptConfig(mode="off", mask=ComponentMask(frozenset())))
    esperado = predict_depth(AdaptDepthModel.from_checkpoint(tiny_checkpoint), b.target)
    np.testing.assert_array_equal(r.depth, esperado)
    assert r.steps_taken == 0 and r.trace == []


def test_unmasked_tensors_and_frozen_stats_stay_bitwise_equal(tiny_model, tiny_bundles):
    b = tiny_bundles[1]
    antes = _copia(tiny_model.to_checkpoint())
    normas = tiny_model.norm_state()
    cfg = AdaptConfig(steps=2, lr=0.05, mask=ComponentMask.from_string("depth_decoder"))
    traza, divergio, pasos = adapt._optimizar(tiny_model, b, cfg, ["prev", "next"], LossWeights())
    assert not divergio and pasos == 2
    despues = _copia(tiny_model.to_checkpoint())
    for g in ("depth_encoder", "pose_encoder", "pose_decoder"):
        assert all(np.array_equal(antes[g][n], despues[g][n]) for n in antes[g])
    assert not all(np.array_equal(antes["depth_decoder"][n], despues["depth_decoder"][n]) for n in antes["depth_decoder"])
    for g, buffers in normas.items():
        for n, arr in buffers.items():
            np.testing.assert_array_equal(arr, tiny_model.norm_state()[g][n])


def test_unfrozen_norm_stats_move(tiny_model, tiny_bundles):
    antes = tiny_model.norm_state()
    mask = ComponentMask(frozenset({"depth_encoder"}), freeze_norm_stats=False)
    adapt._optimizar(tiny_model, tiny_bundles[1], AdaptConfig(steps=1, lr=0.05, mask=mask), ["prev"], LossWeights())
    despues = tiny_model.norm_state()
    assert not np.array_equal(antes["depth_encoder"]["stem.bn.running_mean"], despues["depth_encoder"]["stem.bn.running_mean"])
    for n, arr in antes["pose_encoder"].items():
        np.testing.assert_array_equal(arr, despues["pose_encoder"][n])


def test_unfrozen_norm_stats_stay_inside_the_mask(tiny_model, tiny_bundles):
    antes = tiny_model.norm_state()
    mask = ComponentMask(frozenset({"depth_decoder"}), freeze_norm_stats=False)
    adapt._optimizar(tiny_model, tiny_bundles[1], AdaptConfig(steps=1, lr=0.05, mask=mask), ["prev"], LossWeights())
    despues = tiny_model.norm_state()
    for g in ("depth_encoder", "pose_encoder"):
        for n, arr in antes[g].items():
            np.testing.assert_array_equal(arr, despues[g][n])
    assert all(grupo.norm_stats_frozen for grupo in tiny_model.groups.values())


def test_predict_depth_restores_gradient_flags(tiny_model, tiny_bundles):
    t = tiny_model.groups["depth_encoder"].tensors["stem.conv.weight"]
    t.requires_grad = True
    predict_depth(tiny_model, tiny_bundles[0].target)
    assert t.requires_grad
    assert not tiny_model.groups["pose_decoder"].tensors["pose.weight"].requires_grad


def test_stereo_supervision_only_updates_depth_encoder(tiny_model, stereo_scene, caplog):
    b = sequence_from_spec(stereo_scene)[1]
    antes = _copia(tiny_model.to_checkpoint())
    cfg = AdaptConfig(steps=1, lr=0.05, supervision="stereo", mask=ComponentMask.from_string("pose_encoder+depth_decoder"))
    with caplog.at_level(logging.WARNING, logger="depthCore.adapt"):
        adapt._optimizar(tiny_model, b, cfg, ["stereo"], LossWeights())
    assert "depth_encoder" in caplog.text
    despues = _copia(tiny_model.to_checkpoint())
    for g in ("depth_decoder", "pose_encoder", "pose_decoder"):
        assert all(np.array_equal(antes[g][n], despues[g][n]) for n in antes[g])
    assert not all(np.array_equal(antes["depth_encoder"][n], despues["depth_encoder"][n]) for n in antes["depth_encoder"])


def test_divergence_restores_best_weights(tiny_checkpoint, tiny_bundles, monkeypatch):
    original = adapt.total_loss
    llamadas = {"n": 0}

    def falla_en_el_segundo(*args, **kwargs):
        llamadas["n"] += 1
        if llamadas["n"] == 2:
            raise NonFiniteError("simulada")
        return original(*args, **kwargs)

    monkeypatch.setattr(adapt, "total_loss", falla_en_el_segundo)
    b = tiny_bundles[1]
    r = adapt_instance(tiny_checkpoint, b, AdaptConfig(steps=5, lr=0.05))
    assert r.diverged and r.steps_taken == 1 and len(r.trace) == 1
    esperado = predict_depth(AdaptDepthModel.from_checkpoint(tiny_checkpoint), b.target)
    np.testing.assert_array_equal(r.depth, esperado)


def test_stationary_frames_skip_adaptation(tiny_checkpoint, tiny_bundles):
    r = adapt_instance(tiny_checkpoint, tiny_bundles[1], AdaptConfig(steps=3, motion_threshold=10.0))
    assert r.steps_taken == 0


# ----------------------------------------------------------------------------
# Secuencial, directa y ejecución
# ----------------------------------------------------------------------------

def test_sequential_adaptation_runs_each_frame(tiny_checkpoint, tiny_bundles):
    antes = _copia(tiny_checkpoint)
    resultados = list(adapt_sequential(tiny_checkpoint, tiny_bundles[:3], AdaptConfig(mode="sequential", steps=1, lr=0.05)))
    assert [r.frame_index for r in resultados] == [0, 1, 2]
    assert all(r.steps_taken == 1 for r in resultados)
    assert all(r.metrics is not None for r in resultados)
    assert _iguales(antes, _copia(tiny_checkpoint))
    with pytest.raises(ValueError):
        list(adapt_sequential(tiny_checkpoint, tiny_bundles, AdaptConfig(steps=1)))


def test_direct_optimize_with_zero_steps_is_identity(tiny_checkpoint, tiny_bundles):
    b = tiny_bundles[1]
    profundidad, vectores = baseline_predictions(tiny_checkpoint, b, ["prev", "next"])
    r = direct_optimize(b, profundidad, vectores, lr=1.0, steps=0)
    np.testing.assert_array_equal(r.depth, profundidad)
    assert r.trace == []


def test_direct_optimize_moves_depth_within_range(tiny_checkpoint, tiny_bundles):
    b = tiny_bundles[1]
    profundidad, vectores = baseline_predictions(tiny_checkpoint, b, ["prev", "next"])
    r = direct_optimize(b, profundidad, vectores, lr=10.0, steps=2)
    assert len(r.trace) == 2
    assert not np.array_equal(r.depth, profundidad)
    assert r.depth.min() >= 0.1 and r.depth.max() <= 100.0
    with pytest.raises(ValueError):
        direct_optimize(b, np.zeros_like(profundidad), vectores, lr=1.0, steps=1)


def test_run_frames_is_ordered_and_parallel_matches_serial(tiny_checkpoint, tiny_bundles):
    cfg = AdaptConfig(steps=1, lr=0.05)
    serie = run_frames(tiny_checkpoint, tiny_bundles, cfg, with_baseline=True)
    paralelo = run_frames(tiny_checkpoint, tiny_bundles, cfg, jobs=2)
    assert [r.frame_index for r in serie] == [0, 1, 2, 3]
    for a, b in zip(serie, paralelo):
        np.testing.assert_array_equal(a.depth, b.depth)
    assert all(r.baseline_metrics is not None for r in serie)

    traza = trace_frame(serie)
    assert list(traza.columns) == ["frame_index", "step", "total", "photometric", "smoothness", "mask_ratio", "abs_rel"]
    assert len(traza) == 4


# ----------------------------------------------------------------------------
# Ablación
# ----------------------------------------------------------------------------

def test_ablation_grid_has_one_row_per_config(tiny_checkpoint, tiny_bundles):
    configs = [
        AblationConfig("baseline", ComponentMask(frozenset()), 0.1, 0, "off"),
        AblationConfig("depth_decoder", ComponentMask.from_string("depth_decoder"), 0.05, 1),
        AblationConfig("direct", ComponentMask(), 1.0, 1, "direct"),
    ]
    series = {}
    tabla = ablation_grid(configs, tiny_bundles[1:3], tiny_checkpoint, evaluation=EvalConfig(), series=series)
    assert list(tabla["label"]) == ["baseline", "depth_decoder", "direct"]
    assert (tabla["error"] == "").all()
    assert tabla["abs_rel"].notna().all()
    assert tabla["frames"].tolist() == [2, 2, 2]
    assert set(series) == {"baseline", "depth_decoder", "direct"}
    assert isinstance(series["direct"], pd.Series) and len(series["direct"]) == 2


def test_ablation_failures_land_in_error_column(tiny_checkpoint, tiny_bundles):
    configs = [AblationConfig("estereo", ComponentMask.from_string("depth_encoder"), 0.05, 1)]
    tabla = ablation_grid(configs, tiny_bundles[1:2], tiny_checkpoint, supervision="stereo")
    assert "estéreo" in tabla.loc[0, "error"]
    assert np.isnan(tabla.loc[0, "abs_rel"])
    assert best_config(tabla) is None


def test_best_config_picks_lowest_abs_rel():
    tabla = pd.DataFrame({"label": ["a", "b", "c"], "abs_rel": [0.3, np.nan, 0.1]})
    assert best_config(tabla)["label"] == "c"


def test_component_grid_preset():
    grilla = component_grid(steps=3)
    etiquetas = [c.label for c in grilla]
    assert len(grilla) == 1 + 15 + 4 + 2
    assert len(set(etiquetas)) == len(etiquetas)
    assert etiquetas[0] == "baseline" and "whole_network" in etiquetas
    assert AblationConfig.from_dict(grilla[5].to_dict()) == grilla[5]


def test_ablation_config_maps_to_adapt_config():
    assert AblationConfig("x", steps=0).adapt_config().mode == "off"
    assert AblationConfig("x", steps=4, mode="sequential").adapt_config().steps == 4
    with pytest.raises(ValueError):
        AblationConfig("x", mode="online")


# ----------------------------------------------------------------------------
# Entrenamiento
# ----------------------------------------------------------------------------

def test_train_with_zero_epochs_returns_initialisation(tiny_config, tiny_bundles):
    ckpt = train(tiny_bundles, TrainConfig(epochs=0, seed=5), tiny_config)
    esperado = AdaptDepthModel(tiny_config, seed=5).to_checkpoint()
    assert _iguales(_copia(esperado), _copia(ckpt))
    assert ckpt.metadata["seed"] == 5 and ckpt.metadata["epochs"] == 0


def test_train_is_deterministic_and_changes_weights(tiny_config, tiny_bundles):
    cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3, seed=1)
    a = train(tiny_bundles, cfg, tiny_config, val_bundles=tiny_bundles[1:2])
    b = train(tiny_bundles, cfg, tiny_config, val_bundles=tiny_bundles[1:2])
    assert _iguales(_copia(a), _copia(b))
    inicial = AdaptDepthModel(tiny_config, seed=1).to_checkpoint()
    assert not _iguales(_copia(inicial), _copia(a))
    assert a.metadata["steps"] == 1
    assert a.metadata["val_photometric_initial"] is not None


def test_train_resume_continues_counters(tiny_config, tiny_bundles):
    cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3, seed=1)
    primero = train(tiny_bundles, cfg, tiny_config)
    segundo = train(tiny_bundles, cfg, tiny_config, resume=primero)
    assert segundo.metadata["epochs"] == 2 and segundo.metadata["steps"] == 2


def test_train_without_usable_frames_fails(tiny_config, tiny_bundles):
    with pytest.raises(ValueError):
        train(tiny_bundles, TrainConfig(epochs=1, supervision="stereo"), tiny_config)
