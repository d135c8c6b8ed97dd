import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter
from scipy.stats import beta, spearmanr
from sklearn.isotonic import IsotonicRegression

from windstorm.extract import WindstormRecord
from windstorm.fields import Grid, GriddedFieldStack
from windstorm.margins import XI_ZERO, GpdFit
from windstorm.tracks import StormTrack

logger = logging.getLogger(__name__)

MIN_SERIES = 100
MIN_EXCEEDANCES = 10
DEPENDENCE_PAIRS = (("omega", "sqrt_delta"), ("sqrt_delta", "w"), ("omega", "r_e"), ("omega", "w"))
BOX_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


# Extremal dependence

def extremal_index(series, x: float, run_length: int = 6) -> float:
    """Estimador de rachas: clusters separados por al menos `run_length` no excedencias"""
    series = np.asarray(series, dtype=float)
    exceed = np.flatnonzero(np.nan_to_num(series, nan=-np.inf) > x)
    if exceed.size == 0:
        raise ValueError(f"Sin excedencias del umbral {x}")
    if exceed.size < MIN_EXCEEDANCES:
        logger.debug(f"Sólo {exceed.size} excedencias para el índice extremal")
    clusters = 1 + int(np.count_nonzero(np.diff(exceed) - 1 >= run_length))
    return min(max(clusters / exceed.size, 1.0 / exceed.size), 1.0)


@dataclass(frozen=True)
class ChiEstimate:
    q: np.ndarray
    chi: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_eff: np.ndarray
    joint: np.ndarray
    defined: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"q": self.q, "chi": self.chi, "lo": self.lower, "hi": self.upper, "neff": self.n_eff})


def _binomial_interval(p: float, n: float, level: float = 0.95) -> Tuple[float, float]:
    """Intervalo de Clopper-Pearson con tamaño efectivo (posiblemente fraccionario)"""
    k = p * n
    tail = 0.5 * (1.0 - level)
    lower = 0.0 if k <= 0 else float(beta.ppf(tail, k, n - k + 1))
    upper = 1.0 if k >= n else float(beta.ppf(1.0 - tail, k + 1, n - k))
    return min(lower, p), max(upper, p)


def chi_estimate(series1, series2, q_grid: Sequence[float], run_length: int = 6) -> ChiEstimate:
    """chi(q) = #{ambas > x^q} / #{serie 1 > x^q} en márgenes Exp(1), x^q = -log(1 - q)"""
    s1 = np.nan_to_num(np.asarray(series1, dtype=float), nan=-np.inf)
    s2 = np.nan_to_num(np.asarray(series2, dtype=float), nan=-np.inf)
    if s1.shape != s2.shape or s1.ndim != 1:
        raise ValueError(f"Series de longitudes distintas: {s1.shape} vs {s2.shape}")
    if s1.size < MIN_SERIES:
        raise ValueError(f"Se necesitan al menos {MIN_SERIES} pares ({s1.size})")
    q = np.asarray(q_grid, dtype=float)
    if np.any((q <= 0) | (q >= 1)):
        raise ValueError(f"Niveles q fuera de (0, 1): {q}")
    chi, lower, upper, n_eff = (np.full(q.size, np.nan) for _ in range(4))
    joint = np.zeros(q.size, dtype=np.int64)
    defined = np.zeros(q.size, dtype=bool)
    for i, level in enumerate(q):
        x = -math.log1p(-level)
        first = s1 > x
        n_first = int(first.sum())
        joint[i] = int((first & (s2 > x)).sum())
        if n_first == 0:
            logger.warning(f"q={level}: sin excedencias en la primera serie, chi indefinido")
            continue
        defined[i] = True
        chi[i] = joint[i] / n_first
        n_eff[i] = n_first * extremal_index(s1, x, run_length)
        lower[i], upper[i] = _binomial_interval(chi[i], n_eff[i])
    return ChiEstimate(q, chi, lower, upper, n_eff, joint, defined)


def exp_level(q: Optional[float] = None, years: Optional[float] = None,
              events_per_year: Optional[float] = None) -> float:
    """Nivel crítico en escala Exp(1): cuantil q o nivel de retorno a `years` años"""
    if q is not None:
        return -math.log1p(-q)
    if years is None or events_per_year is None:
        raise ValueError("Indique q o (years, events_per_year)")
    return math.log(years * events_per_year)


def site_series(stacks: Sequence[GriddedFieldStack], sites: Sequence[Tuple[int, int]]) -> Dict[Tuple[int, int], np.ndarray]:
    """Series temporales concatenadas de cada sitio (x, y) a lo largo de las pilas"""
    return {
        (x, y): np.concatenate([stack.values[:, y, x] for stack in stacks]) if stacks else np.zeros(0)
        for x, y in sites
    }


def chi_map(series: Dict[Tuple[int, int], np.ndarray], s1: Tuple[int, int], level: float) -> pd.DataFrame:
    """chi(s1, s2) para cada sitio s2 a un nivel crítico común en escala Exp(1)"""
    first = np.nan_to_num(np.asarray(series[s1], dtype=float), nan=-np.inf) > level
    n_first = int(first.sum())
    if n_first == 0:
        logger.warning(f"Sin excedencias del nivel {level:.3g} en {s1}")
    rows = []
    for (x2, y2), values in series.items():
        joint = int((first & (np.nan_to_num(np.asarray(values, dtype=float), nan=-np.inf) > level)).sum())
        rows.append({"x": x2, "y": y2, "chi": joint / n_first if n_first else np.nan, "joint": joint,
                     "n_first": n_first})
    return pd.DataFrame(rows)


# Return levels

def return_level(fit: GpdFit, years: float, events_per_year: float) -> float:
    """u + sigma/xi [(T n lambda)^xi - 1], con límite u + sigma log(T n lambda) en xi = 0"""
    if not years > 0 or not events_per_year > 0:
        raise ValueError(f"Periodo o frecuencia no positivos: T={years}, n={events_per_year}")
    m = years * events_per_year * fit.exceed_rate
    if m < 1:
        raise ValueError(f"Nivel de retorno por debajo del umbral: T n lambda = {m:.3g} < 1")
    log_m = math.log(m)
    if abs(fit.xi) < XI_ZERO:
        return fit.threshold + fit.sigma * log_m
    return fit.threshold + fit.sigma * math.expm1(fit.xi * log_m) / fit.xi


def empirical_return_level(maxima, years: float, events_per_year: float) -> float:
    """Nivel superado en promedio una vez cada `years` años en una muestra de máximos por evento"""
    maxima = np.nan_to_num(np.asarray(maxima, dtype=float), nan=-np.inf)
    p = 1.0 / (years * events_per_year)
    if maxima.size == 0 or p * maxima.size < 1:
        raise ValueError(f"Catálogo demasiado corto para T={years}: {maxima.size} eventos")
    level = float(np.quantile(maxima, 1.0 - p, method="inverted_cdf"))
    if not np.isfinite(level):
        raise ValueError(f"Nivel de retorno indefinido para T={years}")
    return level


# Distributional checks

@dataclass(frozen=True)
class QqData:
    probs: np.ndarray
    a: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def inside(self) -> np.ndarray:
        return (self.b >= self.lower) & (self.b <= self.upper)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"p": self.probs, "a": self.a, "b": self.b, "lo": self.lower, "hi": self.upper})


def qq_data(sample_a, sample_b, n_quantiles: int = 19, n_bootstrap: int = 500,
            rng: Optional[np.random.Generator] = None) -> QqData:
    """Cuantiles emparejados y banda de tolerancia del 95% por remuestreo de `sample_a`"""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    a, b = a[np.isfinite(a)], b[np.isfinite(b)]
    if a.size < n_quantiles or b.size < n_quantiles:
        raise ValueError(f"Muestras demasiado pequeñas para {n_quantiles} cuantiles: {a.size}, {b.size}")
    rng = rng if rng is not None else np.random.default_rng(0)
    probs = np.arange(1, n_quantiles + 1) / (n_quantiles + 1)
    resampled = np.quantile(rng.choice(a, size=(n_bootstrap, b.size), replace=True), probs, axis=1)
    lower, upper = np.quantile(resampled, [0.025, 0.975], axis=1)
    return QqData(probs, np.quantile(a, probs), np.quantile(b, probs), lower, upper)


def isotonic_check(values, x=None) -> Tuple[np.ndarray, float]:
    """Ajuste isotónico no creciente y máximo residuo absoluto"""
    values = np.asarray(values, dtype=float)
    x = np.arange(values.size) if x is None else np.asarray(x, dtype=float)
    fitted = IsotonicRegression(increasing=False).fit_transform(x, values)
    return fitted, float(np.max(np.abs(fitted - values))) if values.size else 0.0


# Spatial summaries

def event_locations(tracks: Sequence[StormTrack], records: Optional[Sequence[WindstormRecord]] = None,
                    active_only: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    by_id = {record.track_id: record for record in records or ()}
    lon, lat = [], []
    for track in tracks:
        record = by_id.get(track.id)
        for point in track.points:
            if records is not None and active_only and (record is None or not record.is_active(point.t)):
                continue
            lon.append(point.lon)
            lat.append(point.lat)
    return np.asarray(lon), np.asarray(lat)


def spatial_density(tracks: Sequence[StormTrack], grid: Grid, records: Optional[Sequence[WindstormRecord]] = None,
                    active_only: bool = True, sigma: float = 0.0) -> np.ndarray:
    """Conteo de posiciones de trayectoria por celda, suavizado opcionalmente conservando la masa"""
    lon, lat = event_locations(tracks, records, active_only)
    if lon.size == 0:
        raise ValueError("No hay eventos para la densidad espacial")
    x, y = grid.lonlat_to_cell(lon, lat)
    ix, iy = np.rint(x).astype(np.int64), np.rint(y).astype(np.int64)
    inside = (ix >= 0) & (ix < grid.n_x) & (iy >= 0) & (iy < grid.n_y)
    if not inside.all():
        logger.debug(f"{int((~inside).sum())} posiciones fuera de la rejilla")
    counts = np.zeros(grid.shape)
    np.add.at(counts, (iy[inside], ix[inside]), 1.0)
    if sigma > 0:
        total = counts.sum()
        counts = gaussian_filter(counts, sigma=sigma, mode="constant")
        if counts.sum() > 0:
            counts *= total / counts.sum()
    return counts


def storm_relative_summary(records: Sequence[WindstormRecord], tracks: Sequence[StormTrack],
                           exp_stacks: Dict[str, GriddedFieldStack], half_size: int) -> Dict[str, np.ndarray]:
    """Media, cuantiles 95% y 99% y densidad de huellas relativas al centro de la tormenta"""
    by_id = {track.id: track for track in tracks}
    size = 2 * half_size + 1
    windows, covers = [], []
    for record in records:
        track, stack = by_id.get(record.track_id), exp_stacks.get(record.track_id)
        if track is None or stack is None:
            continue
        grid = stack.grid
        xs, ys = grid.lonlat_to_cell(track.lon, track.lat)
        padded_shape = (grid.n_y + 2 * half_size, grid.n_x + 2 * half_size)
        for t, footprint in sorted(record.footprints.items()):
            cx, cy = int(round(xs[t - 1])), int(round(ys[t - 1]))
            padded = np.full(padded_shape, np.nan)
            padded[half_size:-half_size or None, half_size:-half_size or None] = stack.raster(t)
            cover = np.zeros(padded_shape)
            cells = footprint.ellipse.cells_inside(grid.shape)
            cover[cells[:, 1] + half_size, cells[:, 0] + half_size] = 1.0
            y0, x0 = cy, cx
            if not (0 <= y0 and y0 + size <= padded_shape[0] and 0 <= x0 and x0 + size <= padded_shape[1]):
                continue
            windows.append(padded[y0:y0 + size, x0:x0 + size])
            covers.append(cover[y0:y0 + size, x0:x0 + size])
    if not windows:
        raise ValueError("No hay huellas con campos para el resumen relativo")
    stacked = np.stack(windows)
    with np.errstate(all="ignore"):
        return {
            "mean": np.nanmean(stacked, axis=0),
            "q95": np.nanquantile(stacked, 0.95, axis=0),
            "q99": np.nanquantile(stacked, 0.99, axis=0),
            "density": np.mean(covers, axis=0),
        }


def catalog_frame(records: Sequence[WindstormRecord], tracks: Sequence[StormTrack]) -> pd.DataFrame:
    """Una fila por huella activa con sus variables y la vorticidad de la trayectoria"""
    by_id = {track.id: track for track in tracks}
    rows = []
    for record in records:
        track = by_id.get(record.track_id)
        for t, footprint in sorted(record.footprints.items()):
            f = footprint.features
            rows.append({
                "track_id": record.track_id, "t": t,
                "omega": track.point(t).vorticity if track is not None else np.nan,
                "sqrt_delta": math.sqrt(f.delta), "w": f.w, "r_e": f.r_e, "theta_e": f.theta_e,
                "a": f.a, "b": f.b, "r_w": f.r_w, "theta_w": f.theta_w, "gamma": f.gamma,
            })
    return pd.DataFrame(rows, columns=["track_id", "t", "omega", "sqrt_delta", "w", "r_e", "theta_e",
                                       "a", "b", "r_w", "theta_w", "gamma"])


def dependence_summary(records: Sequence[WindstormRecord], tracks: Sequence[StormTrack],
                       n_bins: int = 5) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Correlaciones de Spearman entre variables de la huella y cuantiles por clases de vorticidad"""
    frame = catalog_frame(records, tracks).dropna(subset=["omega"])
    correlations = []
    for first, second in DEPENDENCE_PAIRS:
        rho = spearmanr(frame[first], frame[second])[0] if len(frame) > 2 else np.nan
        correlations.append({"x": first, "y": second, "rho": float(rho), "n": len(frame)})
    binned = pd.DataFrame()
    if len(frame) >= n_bins:
        bins = pd.qcut(frame["omega"], n_bins, duplicates="drop")
        binned = (frame.groupby(bins, observed=True)[["sqrt_delta", "w", "r_e"]]
                  .quantile(list(BOX_QUANTILES)).reset_index())
        binned = binned.rename(columns={"level_1": "quantile"})
        binned["omega"] = binned["omega"].astype(str)
    return pd.DataFrame(correlations), binned
