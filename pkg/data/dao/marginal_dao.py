import json
import logging
from pathlib import Path
from typing import Union

import numpy as np

from data.dao.field_stack_dao import read_field_stack, write_field_stack
from windstorm.errors import FieldFormatError
from windstorm.fields import Grid, GriddedFieldStack, ScaleTag
from windstorm.margins import MarginalModel

logger = logging.getLogger(__name__)

MODEL_FILE = "margins.json"
NODES_X_FILE = "nodes_x.wsf"
NODES_P_FILE = "nodes_p.wsf"


class MarginalDAO:
    """Modelo marginal en disco: registros por celda en JSON y nodos empíricos en WSFSTK01"""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def save(self, model: MarginalModel) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        grid = model.grid
        cells = [
            {
                "iy": int(iy), "ix": int(ix),
                "u": float(model.threshold[iy, ix]),
                "sigma": float(model.sigma[iy, ix]),
                "xi": float(model.xi[iy, ix]),
                "lambda": float(model.rate[iy, ix]),
                "n_exceed": int(model.n_exceed[iy, ix]),
            }
            for iy, ix in zip(*np.nonzero(model.included))
        ]
        document = {
            "grid": {"n_x": grid.n_x, "n_y": grid.n_y, "cell_size": grid.cell_size,
                     "origin_lon": grid.origin_lon, "origin_lat": grid.origin_lat},
            "exp_cap": model.exp_cap,
            "cells": cells,
        }
        with open(self.directory / MODEL_FILE, "w", encoding="utf-8") as handle:
            json.dump(document, handle, indent=1)
        times = np.arange(1, model.node_x.shape[0] + 1)
        write_field_stack(self.directory / NODES_X_FILE,
                          GriddedFieldStack(grid, times, model.node_x, ScaleTag.OBSERVED))
        write_field_stack(self.directory / NODES_P_FILE,
                          GriddedFieldStack(grid, times, model.node_p, ScaleTag.OBSERVED))
        logger.info(f"Modelo marginal guardado en {self.directory} ({len(cells)} celdas)")

    def get(self) -> MarginalModel:
        path = self.directory / MODEL_FILE
        if not path.exists():
            raise FileNotFoundError(f"No existe el modelo marginal: {path}")
        try:
            with open(path, encoding="utf-8") as handle:
                document = json.load(handle)
            grid = Grid(**document["grid"])
            shape = grid.shape
            included = np.zeros(shape, dtype=bool)
            threshold, sigma, xi, rate = (np.full(shape, np.nan) for _ in range(4))
            n_exceed = np.zeros(shape, dtype=np.int64)
            for cell in document["cells"]:
                iy, ix = cell["iy"], cell["ix"]
                included[iy, ix] = True
                threshold[iy, ix] = cell["u"]
                sigma[iy, ix] = cell["sigma"]
                xi[iy, ix] = cell["xi"]
                rate[iy, ix] = cell["lambda"]
                n_exceed[iy, ix] = cell["n_exceed"]
            exp_cap = float(document["exp_cap"])
        except (ValueError, KeyError, TypeError, IndexError) as e:
            logger.error(f"Error leyendo el modelo marginal {path}: {e}")
            raise FieldFormatError(f"Modelo marginal mal formado en {path}: {e}")
        node_x = read_field_stack(self.directory / NODES_X_FILE)
        node_p = read_field_stack(self.directory / NODES_P_FILE)
        if node_x.grid != grid or node_p.grid != grid:
            raise FieldFormatError(f"Los nodos empíricos no coinciden con la rejilla de {path}")
        return MarginalModel(grid, included, threshold, sigma, xi, rate, n_exceed,
                             np.array(node_x.values), np.array(node_p.values), exp_cap)
