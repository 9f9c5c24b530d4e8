# -*- coding: utf-8 -*-
import json

import pandas as pd
import pytest

from dataAccess.checkpointRepo import load_checkpoint, save_checkpoint
from dataAccess.sceneRepo import read_depth_dir
from main import build_parser, main
from UIPresentation.mainApp import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    RESOLVED_NAME,
    ConfigError,
    MainApp,
    RunConfig,
)

SPEC = {"seed": 0, "frames": 4, "width": 64, "height": 32, "boxes": 2}


@pytest.fixture
def datos(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SPEC), encoding="utf-8")
    assert MainApp().run("synth", {"spec": str(spec), "out": str(tmp_path / "seq")}) == EXIT_OK
    return tmp_path / "seq"


@pytest.fixture
def ckpt(tmp_path, tiny_checkpoint):
    return save_checkpoint(tmp_path / "base.adpd", tiny_checkpoint)


def test_defaults_then_file_then_env_then_flags(tmp_path):
    archivo = tmp_path / "cfg.json"
    archivo.write_text(json.dumps({"command": "adapt", "lr": 0.5, "steps": 7, "seed": 3}), encoding="utf-8")
    base = {"ckpt": "a", "data": "b", "out": "c"}

    cfg = RunConfig.resolve("adapt", base, env={})
    assert cfg["lr"] == 0.1 and cfg["steps"] is None and cfg["seed"] == 0

    cfg = RunConfig.resolve("adapt", base, str(archivo), env={})
    assert cfg["lr"] == 0.5 and cfg["steps"] == 7 and cfg["seed"] == 3

    cfg = RunConfig.resolve("adapt", base, str(archivo), env={"ADAPTDEPTH_SEED": "11"})
    assert cfg["seed"] == 11

    cfg = RunConfig.resolve("adapt", {**base, "seed": 5, "lr": None, "steps": 2}, str(archivo), env={"ADAPTDEPTH_SEED": "11"})
    assert cfg["seed"] == 5 and cfg["lr"] == 0.5 and cfg["steps"] == 2


def test_config_errors(tmp_path):
    base = {"ckpt": "a", "data": "b", "out": "c"}
    with pytest.raises(ConfigError, match="desconocidas"):
        archivo = tmp_path / "extra.json"
        archivo.write_text('{"learning_rate": 1}', encoding="utf-8")
        RunConfig.resolve("adapt", base, str(archivo), env={})
    with pytest.raises(ConfigError, match="línea"):
        roto = tmp_path / "roto.json"
        roto.write_text('{"lr": }', encoding="utf-8")
        RunConfig.resolve("adapt", base, str(roto), env={})
    with pytest.raises(ConfigError, match="'train'"):
        otro = tmp_path / "otro.json"
        otro.write_text('{"command": "train"}', encoding="utf-8")
        RunConfig.resolve("adapt", base, str(otro), env={})
    with pytest.raises(ConfigError, match="ADAPTDEPTH_SEED"):
        RunConfig.resolve("adapt", base, env={"ADAPTDEPTH_SEED": "x"})
    with pytest.raises(ConfigError, match="ckpt"):
        RunConfig.resolve("adapt", {"data": "b", "out": "c"}, env={})
    with pytest.raises(ConfigError):
        RunConfig.resolve("export", {}, env={})


def test_resolved_config_round_trips(tmp_path):
    cfg = RunConfig.resolve("eval", {"pred": "p", "gt": "g"}, env={})
    ruta = cfg.save(tmp_path / "salida")
    assert ruta.name == RESOLVED_NAME
    guardado = tmp_path / "guardado.json"
    guardado.write_text(ruta.read_text(encoding="utf-8"), encoding="utf-8")
    assert RunConfig.resolve("eval", {}, str(guardado), env={}) == cfg


def test_exit_codes_for_bad_config_and_missing_data(tmp_path, ckpt):
    app = MainApp()
    assert app.run("adapt", {"ckpt": str(ckpt), "data": str(tmp_path / "no_existe"), "out": str(tmp_path / "o")}) == EXIT_IO
    assert app.run("adapt", {"ckpt": str(tmp_path / "no.adpd"), "data": str(tmp_path), "out": str(tmp_path / "o")}) == EXIT_IO
    assert app.run("adapt", {"data": str(tmp_path)}) == EXIT_CONFIG
    spec = tmp_path / "malo.json"
    spec.write_text('{"seed": 1, "color": "rojo"}', encoding="utf-8")
    assert app.run("synth", {"spec": str(spec), "out": str(tmp_path / "s")}) == EXIT_CONFIG


def test_synth_writes_dataset_and_resolved_config(datos):
    assert len(list((datos / "frames").glob("*.ppm"))) == 4
    resuelto = json.loads((datos / RESOLVED_NAME).read_text(encoding="utf-8"))
    assert resuelto["command"] == "synth" and resuelto["jobs"] == 1


def test_train_without_epochs_writes_checkpoint(tmp_path, datos):
    salida = tmp_path / "modelo" / "base.adpd"
    assert MainApp().run("train", {"data": str(datos), "out": str(salida), "epochs": 0}) == EXIT_OK
    ckpt = load_checkpoint(salida)
    assert ckpt.metadata["epochs"] == 0 and ckpt.metadata["steps"] == 0
    assert ckpt.hyperparameters["height"] == 32 and ckpt.hyperparameters["width"] == 64
    assert (salida.parent / RESOLVED_NAME).exists()


def test_adapt_then_eval(tmp_path, datos, ckpt):
    salida = tmp_path / "adapt"
    flags = {"ckpt": str(ckpt), "data": str(datos), "out": str(salida), "steps": 1, "lr": 0.01, "components": "depth_decoder"}
    assert MainApp().run("adapt", flags) == EXIT_OK
    for nombre in ("trace.csv", "metrics.csv", "frames.csv", "chart.svg", RESOLVED_NAME):
        assert (salida / nombre).exists(), nombre
    assert sorted(read_depth_dir(salida)) == [0, 1, 2, 3]
    cuadros = pd.read_csv(salida / "frames.csv")
    assert list(cuadros["frame"]) == [0, 1, 2, 3]
    assert set(cuadros["steps_taken"]) == {1} and not cuadros["diverged"].any()
    assert "seconds" not in " ".join(pd.read_csv(salida / "metrics.csv").columns)

    evaluacion = tmp_path / "eval"
    assert MainApp().run("eval", {"pred": str(salida), "gt": str(datos), "out": str(evaluacion)}) == EXIT_OK
    resumen = pd.read_csv(evaluacion / "metrics.csv")
    previo = pd.read_csv(salida / "metrics.csv")
    pd.testing.assert_frame_equal(resumen, previo)


def test_adapt_is_deterministic(tmp_path, datos, ckpt):
    base = {"ckpt": str(ckpt), "data": str(datos), "steps": 1, "lr": 0.01, "components": "depth_decoder"}
    assert MainApp().run("adapt", {**base, "out": str(tmp_path / "a")}) == EXIT_OK
    assert MainApp().run("adapt", {**base, "out": str(tmp_path / "b"), "jobs": 2}) == EXIT_OK
    for nombre in ("trace.csv", "metrics.csv", "frames.csv"):
        assert (tmp_path / "a" / nombre).read_bytes() == (tmp_path / "b" / nombre).read_bytes(), nombre


def test_eval_reports_missing_ground_truth(tmp_path, datos, ckpt):
    salida = tmp_path / "adapt"
    assert MainApp().run("adapt", {"ckpt": str(ckpt), "data": str(datos), "out": str(salida), "mode": "off"}) == EXIT_OK
    (datos / "depth" / "000003.f32").unlink()
    assert MainApp().run("eval", {"pred": str(salida), "gt": str(datos)}) == EXIT_IO


def test_ablate_writes_table_and_timing(tmp_path, datos, ckpt):
    grilla = tmp_path / "grilla.json"
    grilla.write_text(
        json.dumps(
            {
                "configs": [
                    {"label": "sin adaptar", "mode": "off"},
                    {"label": "decoder", "components": "depth_decoder", "steps": 1, "lr": 0.01},
                ]
            }
        ),
        encoding="utf-8",
    )
    salida = tmp_path / "ablacion" / "tabla.csv"
    flags = {"ckpt": str(ckpt), "data": str(datos), "grid": str(grilla), "out": str(salida), "svg": True}
    assert MainApp().run("ablate", flags) == EXIT_OK
    tabla = pd.read_csv(salida, keep_default_na=False)
    assert list(tabla["label"]) == ["sin adaptar", "decoder"]
    assert "seconds_per_image" not in tabla.columns
    assert (tabla["error"] == "").all()
    tiempos = pd.read_csv(salida.with_name("tabla_timing.csv"))
    assert list(tiempos.columns) == ["label", "seconds_per_image"]
    assert (salida.parent / "chart.svg").exists()


def test_ablate_rejects_malformed_grid(tmp_path, datos, ckpt):
    grilla = tmp_path / "grilla.json"
    grilla.write_text('{"configs": [{"mode": "teleport"}]}', encoding="utf-8")
    flags = {"ckpt": str(ckpt), "data": str(datos), "grid": str(grilla), "out": str(tmp_path / "t.csv")}
    assert MainApp().run("ablate", flags) == EXIT_CONFIG


def test_parser_leaves_unset_flags_empty():
    args = build_parser().parse_args(["adapt", "--ckpt", "a", "--data", "b", "--out", "c", "--freeze-norm-stats", "no"])
    assert args.freeze_norm_stats is False
    assert args.lr is None and args.crop is None and args.steps is None
    with pytest.raises(SystemExit):
        build_parser().parse_args(["adapt", "--mode", "always"])


def test_main_returns_exit_code(tmp_path, monkeypatch):
    monkeypatch.delenv("ADAPTDEPTH_SEED", raising=False)
    assert main(["eval", "--pred", str(tmp_path / "nada"), "--gt", str(tmp_path)]) == EXIT_IO


@pytest.mark.slow
def test_train_one_epoch_then_resume(tmp_path, datos):
    salida = tmp_path / "base.adpd"
    assert MainApp().run("train", {"data": str(datos), "out": str(salida), "epochs": 1, "batch_size": 2, "lr": 1e-4}) == EXIT_OK
    assert load_checkpoint(salida).metadata["steps"] == 1
    reanudado = tmp_path / "reanudado.adpd"
    assert MainApp().run("train", {"data": str(datos), "out": str(reanudado), "epochs": 1, "resume": str(salida)}) == EXIT_OK
    assert load_checkpoint(reanudado).metadata["epochs"] == 2


def test_resume_with_empty_splits_uses_checkpoint_config(tmp_path, datos, ckpt, tiny_checkpoint):
    manifiesto = json.loads((datos / "manifest.json").read_text(encoding="utf-8"))
    manifiesto["splits"] = {"train": [], "val": [], "test": [0, 1, 2, 3]}
    (datos / "manifest.json").write_text(json.dumps(manifiesto), encoding="utf-8")
    salida = tmp_path / "reanudado.adpd"
    flags = {"data": str(datos), "out": str(salida), "resume": str(ckpt)}
    assert MainApp().run("train", {**flags, "epochs": 1}) == EXIT_CONFIG
    assert MainApp().run("train", {**flags, "epochs": 0}) == EXIT_OK
    assert load_checkpoint(salida).hyperparameters == tiny_checkpoint.hyperparameters
    assert MainApp().run("train", {"data": str(datos), "out": str(salida), "epochs": 0}) == EXIT_CONFIG
