import configparser
import json
import logging
import zipfile
from pathlib import Path
from typing import Dict, Union

import numpy as np

from config import VERSION, RunConfig
from windstorm.activity import ActivityModel, Smooth
from windstorm.errors import ConfigError, FieldFormatError
from windstorm.evolution import COMPONENTS, ComponentModel, InitialModel, TransitionModel
from windstorm.fields import Grid
from windstorm.kde import KdeModel
from windstorm.storm_model import FittedStormModel
from windstorm.windfield import AlphaModel, FootprintBank

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def write_npz(path: Union[str, Path], arrays: Dict[str, np.ndarray]) -> None:
    """Escribe un .npz con fechas fijas en el zip para que sea reproducible byte a byte"""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_DATE)
            with archive.open(info, "w", force_zip64=True) as handle:
                np.lib.format.write_array(handle, np.asarray(arrays[name]), allow_pickle=False)


def activity_to_dict(model: ActivityModel) -> Dict:
    return {
        "kind": model.kind,
        "covariates": list(model.covariates),
        "intercept": model.intercept,
        "smooths": [
            {"name": s.name, "index": s.index, "knots": s.knots.tolist(), "lower": s.lower, "upper": s.upper,
             "constraint": s.constraint.tolist(), "start": s.start, "stop": s.stop}
            for s in model.smooths
        ],
        "coef": np.asarray(model.coef).tolist(),
        "lambdas": list(model.lambdas),
        "covariance": None if model.covariance is None else model.covariance.tolist(),
        "medians": list(model.medians),
        "edf": model.edf,
    }


def activity_from_dict(document: Dict) -> ActivityModel:
    smooths = tuple(
        Smooth(s["name"], int(s["index"]), np.asarray(s["knots"]), float(s["lower"]), float(s["upper"]),
               np.asarray(s["constraint"]), int(s["start"]), int(s["stop"]))
        for s in document["smooths"]
    )
    covariance = document["covariance"]
    return ActivityModel(document["kind"], tuple(document["covariates"]), float(document["intercept"]),
                         smooths, np.asarray(document["coef"], dtype=float), tuple(document["lambdas"]),
                         None if covariance is None else np.asarray(covariance, dtype=float),
                         tuple(document["medians"]), float(document["edf"]))


class ModelDAO:
    """Paquete del modelo ajustado: manifest.json, un .npz por KDE y un JSON por modelo de actividad"""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def _save_kde(self, name: str, model: KdeModel) -> str:
        filename = f"{name}.npz"
        write_npz(self.directory / filename, model.to_arrays())
        return filename

    def _load_kde(self, filename: str) -> KdeModel:
        with np.load(self.directory / filename, allow_pickle=False) as arrays:
            return KdeModel.from_arrays(arrays)

    def _save_components(self, prefix: str, components: Dict[str, ComponentModel]) -> Dict:
        return {
            name: {str(lags): self._save_kde(f"{prefix}_{name}_L{lags}", kde)
                   for lags, kde in sorted(components[name].by_lags.items())}
            for name in COMPONENTS
        }

    def _load_components(self, files: Dict) -> Dict[str, ComponentModel]:
        return {
            name: ComponentModel(name, {int(lags): self._load_kde(f) for lags, f in files[name].items()})
            for name in COMPONENTS
        }

    def save(self, model: FittedStormModel) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        for kind, activity in (("activation", model.activation), ("termination", model.termination)):
            with open(self.directory / f"{kind}.json", "w", encoding="utf-8") as handle:
                json.dump(activity_to_dict(activity), handle, indent=1)
        transition = model.transition
        write_npz(self.directory / "bank.npz", model.bank.to_arrays())
        grid = model.grid
        manifest = {
            "version": VERSION,
            "config": model.config.to_ini(),
            "config_sha256": model.config.digest(),
            "grid": {"n_x": grid.n_x, "n_y": grid.n_y, "cell_size": grid.cell_size,
                     "origin_lon": grid.origin_lon, "origin_lat": grid.origin_lat},
            "activation": "activation.json",
            "termination": "termination.json",
            "transition": {
                "order": transition.order,
                "window_lon": transition.window_lon,
                "window_lat": transition.window_lat,
                "min_window_tuples": transition.min_window_tuples,
                "max_rejections": transition.max_rejections,
                "forward": self._save_components("forward", transition.forward),
                "backward": (self._save_components("backward", transition.backward)
                             if transition.backward is not None else None),
            },
            "initial": self._save_kde("initial", model.initial.kde),
            "alpha": self._save_kde("alpha", model.alpha.kde),
            "bank": "bank.npz",
        }
        with open(self.directory / MANIFEST_FILE, "w", encoding="utf-8") as handle:
            json.dump(manifest, handle, indent=1, sort_keys=True)
        logger.info(f"Modelo guardado en {self.directory}")

    def get(self) -> FittedStormModel:
        path = self.directory / MANIFEST_FILE
        if not path.exists():
            raise FileNotFoundError(f"No existe el paquete del modelo: {path}")
        try:
            with open(path, encoding="utf-8") as handle:
                manifest = json.load(handle)
            parser = configparser.ConfigParser()
            parser.read_string(manifest["config"])
            config = RunConfig.from_mapping({name: dict(parser[name]) for name in parser.sections()})
            grid = Grid(**manifest["grid"])
            activities = {}
            for kind in ("activation", "termination"):
                with open(self.directory / manifest[kind], encoding="utf-8") as handle:
                    activities[kind] = activity_from_dict(json.load(handle))
            stored = manifest["transition"]
            transition = TransitionModel(
                int(stored["order"]), self._load_components(stored["forward"]),
                self._load_components(stored["backward"]) if stored["backward"] is not None else None,
                float(stored["window_lon"]), float(stored["window_lat"]),
                int(stored["min_window_tuples"]), int(stored["max_rejections"]),
            )
            initial = InitialModel(self._load_kde(manifest["initial"]))
            alpha = AlphaModel(self._load_kde(manifest["alpha"]))
            with np.load(self.directory / manifest["bank"], allow_pickle=False) as arrays:
                bank = FootprintBank.from_arrays(arrays)
        except (ValueError, KeyError, TypeError, OSError, zipfile.BadZipFile,
                configparser.Error, ConfigError) as e:
            logger.error(f"Error leyendo el modelo {path}: {e}")
            raise FieldFormatError(f"Paquete de modelo mal formado en {path}: {e}")
        logger.info(f"Modelo cargado de {self.directory} (versión {manifest['version']})")
        return FittedStormModel(grid, activities["activation"], activities["termination"], transition,
                                initial, alpha, bank, config)
