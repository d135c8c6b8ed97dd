import logging
from pathlib import Path
from typing import List, Sequence, Union

import pandas as pd

from windstorm.errors import TrackFormatError
from windstorm.tracks import StormTrack, TrackPoint

logger = logging.getLogger(__name__)

HEADER = ["track_id", "t", "lon", "lat", "vorticity"]
FLOAT_FORMAT = "%.17g"


def read_tracks(path: Union[str, Path]) -> List[StormTrack]:
    """Lee trayectorias del CSV `track_id,t,lon,lat,vorticity`, agrupadas por id"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No existe el archivo de trayectorias: {path}")
    with open(path, encoding="utf-8") as handle:
        first = handle.readline().strip()
    if first.split(",") != HEADER:
        raise TrackFormatError(f"Cabecera inesperada en {path}: {first!r}")
    try:
        frame = pd.read_csv(path, dtype={"track_id": str}, encoding="utf-8", float_precision="round_trip")
    except (ValueError, pd.errors.ParserError) as e:
        raise TrackFormatError(f"Error leyendo {path}: {e}")
    for column in HEADER[1:]:
        numeric = pd.to_numeric(frame[column], errors="coerce")
        if numeric.isna().any():
            row = int(numeric.isna().to_numpy().argmax()) + 2
            raise TrackFormatError(f"Campo no numérico '{column}' en la línea {row}")
        frame[column] = numeric
    if (frame["t"] != frame["t"].round()).any():
        raise TrackFormatError("Los tiempos deben ser enteros")
    if (frame["vorticity"] <= 0).any():
        raise TrackFormatError("La vorticidad debe ser positiva")

    tracks: List[StormTrack] = []
    for track_id, group in frame.groupby("track_id", sort=False):
        group = group.sort_values("t", kind="stable")
        times = group["t"].astype(int).tolist()
        if times != list(range(1, len(times) + 1)):
            raise TrackFormatError(f"Trayectoria {track_id}: tiempos no consecutivos {times[:5]}")
        points = tuple(
            TrackPoint(int(row.t), float(row.lon), float(row.lat), float(row.vorticity))
            for row in group.itertuples(index=False)
        )
        tracks.append(StormTrack(str(track_id), points))
    logger.info(f"{len(tracks)} trayectorias leídas de {path}")
    return tracks


def write_tracks(path: Union[str, Path], tracks: Sequence[StormTrack]) -> None:
    rows = [
        {"track_id": track.id, "t": p.t, "lon": p.lon, "lat": p.lat, "vorticity": p.vorticity}
        for track in tracks
        for p in track.points
    ]
    pd.DataFrame(rows, columns=HEADER).to_csv(path, index=False, float_format=FLOAT_FORMAT)


class TracksDAO:
    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def get_all(self) -> List[StormTrack]:
        return read_tracks(self.path)

    def save(self, tracks: Sequence[StormTrack]) -> None:
        write_tracks(self.path, tracks)
