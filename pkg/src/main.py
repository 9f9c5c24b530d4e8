#!/usr/bin/python
# -*- coding: utf-8 -*-
"""
Punto de entrada: `python src/main.py <synth|train|adapt|eval|ablate> ...`.

Los flags no indicados quedan en None para que el archivo --config y los
valores por defecto de cada comando tengan efecto.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from UIPresentation.mainApp import MainApp


def _bool(texto: str) -> bool:
    if texto.lower() in ("1", "true", "yes", "si", "sí"):
        return True
    if texto.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"Valor booleano inválido '{texto}'.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptdepth", description="Profundidad auto-supervisada con adaptación en inferencia.")
    sub = parser.add_subparsers(dest="command", required=True)

    def comando(nombre: str, ayuda: str) -> argparse.ArgumentParser:
        p = sub.add_parser(nombre, help=ayuda)
        p.add_argument("--config", help="Archivo JSON de configuración; los flags tienen prioridad.")
        p.add_argument("--seed", type=int)
        return p

    p = comando("synth", "Genera un dataset sintético desde una spec JSON.")
    p.add_argument("--spec")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)

    p = comando("train", "Entrena un checkpoint base.")
    p.add_argument("--data")
    p.add_argument("--out", help="Ruta del checkpoint de salida.")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--supervision", choices=["mono", "stereo", "ms", "mono+stereo"])
    p.add_argument("--resume")
    p.add_argument("--filter-stationary", dest="filter_stationary", type=_bool)

    p = comando("adapt", "Adapta el modelo en inferencia y predice profundidad.")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--mode", choices=["instance", "sequential", "off"])
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--components", help='Ej. "depth_encoder+pose_encoder".')
    p.add_argument("--freeze-norm-stats", dest="freeze_norm_stats", type=_bool)
    p.add_argument("--supervision", choices=["mono", "stereo", "ms", "mono+stereo"])
    p.add_argument("--motion-threshold", dest="motion_threshold", type=float)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--scaling", choices=["median", "baseline", "none"])
    p.add_argument("--cap", type=float)
    p.add_argument("--crop", action="store_true", default=None)
    p.add_argument("--jobs", type=int)
    p.add_argument("--html", action="store_true", default=None)

    p = comando("eval", "Evalúa mapas de profundidad contra la verdad de terreno.")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--out")
    p.add_argument("--scaling", choices=["median", "baseline", "none"])
    p.add_argument("--cap", type=float)
    p.add_argument("--floor", type=float)
    p.add_argument("--crop", action="store_true", default=None)
    p.add_argument("--factor", type=float)

    p = comando("ablate", "Corre una grilla de ablación y escribe la tabla CSV.")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--grid")
    p.add_argument("--preset", choices=["components", "lr", "steps", "direct"])
    p.add_argument("--out", help="Ruta del CSV de salida.")
    p.add_argument("--svg", action="store_true", default=None)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--supervision", choices=["mono", "stereo", "ms", "mono+stereo"])
    p.add_argument("--scaling", choices=["median", "baseline", "none"])
    p.add_argument("--cap", type=float)
    p.add_argument("--crop", action="store_true", default=None)
    p.add_argument("--jobs", type=int)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("ADAPTDEPTH_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    return MainApp().run(args.command, flags, args.config)


if __name__ == "__main__":
    sys.exit(main())
