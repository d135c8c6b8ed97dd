import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from windstorm.ellipse import Ellipse, FootprintFeatures
from windstorm.errors import TrackFormatError
from windstorm.extract import Footprint, WindstormRecord

logger = logging.getLogger(__name__)

HEADER = ["track_id", "t", "active", "A", "B", "W", "R_E", "Theta_E", "R_W", "Theta_W", "Gamma",
          "cx", "cy", "Exx", "Exy", "Eyy"]
FLOAT_FORMAT = "%.17g"


def _row(track_id: str, t: int, footprint) -> Dict:
    if footprint is None:
        return {"track_id": track_id, "t": t, "active": 0}
    f, e = footprint.features, footprint.ellipse
    return {
        "track_id": track_id, "t": t, "active": 1,
        "A": f.a, "B": f.b, "W": f.w, "R_E": f.r_e, "Theta_E": f.theta_e,
        "R_W": f.r_w, "Theta_W": f.theta_w, "Gamma": f.gamma,
        "cx": e.centre[0], "cy": e.centre[1],
        "Exx": e.shape[0, 0], "Exy": e.shape[0, 1], "Eyy": e.shape[1, 1],
    }


def write_catalog(path: Union[str, Path], records: Sequence[WindstormRecord]) -> None:
    """Escribe el catálogo de huellas: una fila por paso, columnas vacías en pasos inactivos"""
    rows = [
        _row(record.track_id, t, record.footprints.get(t))
        for record in records
        for t in range(1, record.duration + 1)
    ]
    pd.DataFrame(rows, columns=HEADER).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_catalog(path: Union[str, Path]) -> List[WindstormRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No existe el catálogo: {path}")
    try:
        frame = pd.read_csv(path, dtype={"track_id": str}, encoding="utf-8", float_precision="round_trip")
    except (ValueError, pd.errors.ParserError) as e:
        logger.error(f"Error leyendo el catálogo {path}: {e}")
        raise TrackFormatError(f"Catálogo mal formado {path}: {e}")
    if list(frame.columns) != HEADER:
        raise TrackFormatError(f"Cabecera inesperada en {path}: {list(frame.columns)}")

    records: List[WindstormRecord] = []
    for track_id, group in frame.groupby("track_id", sort=False):
        group = group.sort_values("t", kind="stable")
        times = group["t"].astype(int).tolist()
        if times != list(range(1, len(times) + 1)):
            raise TrackFormatError(f"Catálogo {track_id}: pasos no consecutivos")
        footprints = {}
        for row in group[group["active"] == 1].itertuples(index=False):
            shape = np.array([[row.Exx, row.Exy], [row.Exy, row.Eyy]])
            ellipse = Ellipse(np.array([row.cx, row.cy]), shape)
            features = FootprintFeatures(t=int(row.t), a=row.A, b=row.B, w=row.W, r_e=row.R_E,
                                         theta_e=row.Theta_E, r_w=row.R_W, theta_w=row.Theta_W,
                                         gamma=row.Gamma)
            footprints[int(row.t)] = Footprint(ellipse, features)
        records.append(WindstormRecord(str(track_id), len(times), footprints))
    logger.info(f"{len(records)} registros leídos de {path}")
    return records


class CatalogDAO:
    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def get_all(self) -> List[WindstormRecord]:
        return read_catalog(self.path)

    def save(self, records: Sequence[WindstormRecord]) -> None:
        write_catalog(self.path, records)
