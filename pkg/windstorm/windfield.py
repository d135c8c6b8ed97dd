import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky
from scipy.optimize import least_squares
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, pdist
from scipy.special import gamma as gamma_fn
from scipy.special import kve
from scipy.stats import norm, rankdata

from config import KdeSection, WindfieldSection
from windstorm.ellipse import Ellipse, FootprintFeatures
from windstorm.errors import FitError, SimulationError
from windstorm.extract import WindstormRecord
from windstorm.fields import GriddedFieldStack, ScaleTag
from windstorm.kde import KdeModel, build_kde, conditional_sample
from windstorm.margins import MarginalModel, from_exp_margins
from windstorm.tracks import StormTrack
from windstorm.utils import derive_rng

logger = logging.getLogger(__name__)

MAX_REDRAWS = 20
RELATIVE_WEIGHT_FLOOR = 1e-12


# Correlation

def matern(u, alpha: float, kappa: float = 0.6):
    """rho(u) = 2^(1-kappa)/Gamma(kappa) (u/alpha)^kappa K_kappa(u/alpha), con rho(0) = 1"""
    if not alpha > 0 or not kappa > 0:
        raise ValueError(f"Parámetros Matérn inválidos: alpha={alpha}, kappa={kappa}")
    x = np.asarray(u, dtype=float) / alpha
    out = np.ones_like(x)
    positive = x > 0
    xp = x[positive]
    with np.errstate(under="ignore"):
        out[positive] = 2.0 ** (1.0 - kappa) / gamma_fn(kappa) * xp ** kappa * kve(kappa, xp) * np.exp(-xp)
    return float(out) if out.ndim == 0 else out


def anisotropy_matrix(psi: float, zeta: float, scale_then_rotate: bool = False) -> np.ndarray:
    """Matriz M con distancia ||M (s_i - s_j)||: giro de -psi y estiramiento diag(1, zeta)"""
    if not zeta >= 1:
        raise ValueError(f"La razón de anisotropía debe ser >= 1: {zeta}")
    c, s = math.cos(psi), math.sin(psi)
    rotation = np.array([[c, s], [-s, c]])
    stretch = np.diag([1.0, zeta])
    return rotation @ stretch if scale_then_rotate else stretch @ rotation


def anisotropic_distance(s_i, s_j, psi: float, zeta: float, scale_then_rotate: bool = False):
    matrix = anisotropy_matrix(psi, zeta, scale_then_rotate)
    diff = np.asarray(s_i, dtype=float) - np.asarray(s_j, dtype=float)
    out = np.linalg.norm(diff @ matrix.T, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class GpParams:
    kappa: float
    alpha: float
    psi: float
    zeta: float
    scale_then_rotate: bool = False

    def __post_init__(self):
        if not self.alpha > 0 or not self.kappa > 0:
            raise ValueError(f"Parámetros GP inválidos: alpha={self.alpha}, kappa={self.kappa}")
        if not self.zeta >= 1:
            raise ValueError(f"La razón de anisotropía debe ser >= 1: {self.zeta}")

    @classmethod
    def for_footprint(cls, features: FootprintFeatures, alpha: float, config: WindfieldSection) -> "GpParams":
        """psi perpendicular a Theta_E y zeta = A/B"""
        return cls(config.kappa, alpha, features.theta_e, max(features.a / features.b, 1.0),
                   config.scale_then_rotate)

    @property
    def matrix(self) -> np.ndarray:
        return anisotropy_matrix(self.psi, self.zeta, self.scale_then_rotate)

    def correlation(self, cells_a, cells_b) -> np.ndarray:
        m = self.matrix
        a = np.asarray(cells_a, dtype=float) @ m.T
        b = np.asarray(cells_b, dtype=float) @ m.T
        return matern(cdist(a, b), self.alpha, self.kappa)


# Variogram

def _subsample(n: int, max_cells: int) -> np.ndarray:
    if n <= max_cells:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, max_cells).round().astype(np.int64))


def empirical_variogram(values, cells, psi: float, zeta: float, n_bins: int = 15, max_cells: int = 2000,
                        scale_then_rotate: bool = False) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Semivariograma en distancias corregidas por anisotropía, hasta la mitad de la distancia máxima"""
    values = np.asarray(values, dtype=float)
    cells = np.asarray(cells, dtype=float)
    if values.shape[0] != cells.shape[0] or values.shape[0] < 2:
        raise ValueError(f"Valores y celdas incompatibles: {values.shape} vs {cells.shape}")
    keep = _subsample(values.size, max_cells)
    coords = cells[keep] @ anisotropy_matrix(psi, zeta, scale_then_rotate).T
    d = pdist(coords)
    g = 0.5 * pdist(values[keep][:, None], metric="sqeuclidean")
    edges = np.linspace(0.0, 0.5 * d.max(), n_bins + 1)
    which = np.digitize(d, edges[1:-1])
    inside = d <= edges[-1]
    counts = np.bincount(which[inside], minlength=n_bins)
    sums_d = np.bincount(which[inside], weights=d[inside], minlength=n_bins)
    sums_g = np.bincount(which[inside], weights=g[inside], minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        lags = np.where(counts > 0, sums_d / counts, np.nan)
        semivariance = np.where(counts > 0, sums_g / counts, np.nan)
    return lags, semivariance, counts


def estimate_alpha(values, cells, psi: float, zeta: float, kappa: float = 0.6, n_bins: int = 15,
                   min_cells: int = 200, max_cells: int = 2000, scale_then_rotate: bool = False) -> float:
    """Alcance alpha por mínimos cuadrados ponderados contra el variograma 1 - rho(u)"""
    values = np.asarray(values, dtype=float)
    if values.size < min_cells:
        raise FitError(f"Se necesitan al menos {min_cells} celdas para el variograma ({values.size})")
    if np.ptp(values) == 0:
        raise FitError("Campo sin estructura espacial: valores constantes")
    lags, semivariance, counts = empirical_variogram(values, cells, psi, zeta, n_bins, max_cells,
                                                     scale_then_rotate)
    used = counts > 0
    h, g, w = lags[used], semivariance[used], np.sqrt(counts[used] / counts[used].sum())
    lower, upper = math.log(1e-3 * h.min()), math.log(1e3 * h.max())

    def residuals(params):
        return w * (g - (1.0 - matern(h, math.exp(params[0]), kappa)))

    start = min(max(math.log(np.median(h)), lower), upper)
    result = least_squares(residuals, x0=[start], bounds=([lower], [upper]))
    alpha = math.exp(result.x[0])
    if result.x[0] <= lower + 1e-6:
        raise FitError("Variograma plano: campo sin estructura espacial")
    if result.x[0] >= upper - 1e-6:
        logger.warning(f"Alcance en el límite superior del ajuste: alpha={alpha:.3g}")
    return alpha


# Footprint value distribution

@dataclass(frozen=True, eq=False)
class FootprintDistribution:
    """CDF ponderada lineal a trozos de los valores Exp(1) dentro de la huella"""
    values: np.ndarray
    weights: np.ndarray
    nodes: np.ndarray
    probs: np.ndarray
    lower: float

    @classmethod
    def from_weighted_sample(cls, values, weights, upper: Optional[float] = None,
                             lower_quantile: float = 0.001) -> "FootprintDistribution":
        values = np.asarray(values, dtype=float)
        weights = np.asarray(weights, dtype=float)
        ok = np.isfinite(values) & (weights > 0)
        if upper is not None:
            ok &= values <= upper
        values, weights = values[ok], weights[ok]
        if values.size == 0:
            if upper is None:
                raise ValueError("Distribución sin valores")
            values, weights = np.array([float(upper)]), np.array([1.0])
        order = np.argsort(values, kind="stable")
        values, weights = values[order], weights[order]
        starts = np.flatnonzero(np.r_[True, np.diff(values) > 0])
        values, weights = values[starts], np.add.reduceat(weights, starts)
        weights = weights / weights.sum()
        keep = weights >= RELATIVE_WEIGHT_FLOOR * weights.max()
        values, weights = values[keep], weights[keep] / weights[keep].sum()

        m = values.size
        spread = values[-1] - values[0]
        gap = spread / m if spread > 0 else max(abs(values[0]), 1.0) * 1e-6
        left = max(values[0] - gap, 0.0) if values[0] > 0 else values[0] - gap
        if upper is not None and upper > values[-1]:
            right = float(upper)
        else:
            right = values[-1] + max(abs(values[-1]), 1.0) * 1e-9
        probs = np.cumsum(weights) - 0.5 * weights
        nodes = np.r_[left, values, right]
        probs = np.r_[0.0, probs, 1.0]
        lower = float(np.interp(lower_quantile, probs, nodes))
        return cls(values, weights, nodes, probs, lower)

    @property
    def top_probability(self) -> float:
        """Probabilidad del mayor valor observado, estrictamente menor que 1"""
        return float(self.probs[-2])

    def cdf(self, x):
        out = np.interp(x, self.nodes, self.probs)
        return float(out) if np.ndim(out) == 0 else out

    def quantile(self, p):
        out = np.interp(p, self.probs, self.nodes)
        return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class FootprintBank:
    """Valores Exp(1) de las huellas observadas, ordenados, con su huella y covariables (W, Delta, Omega)"""
    values: np.ndarray
    owners: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        covariates = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        if covariates.shape[0] == 0 or covariates.shape[1] != 3:
            raise ValueError(f"Covariables del banco inválidas: {covariates.shape}")
        order = np.argsort(self.values, kind="stable")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float)[order])
        object.__setattr__(self, "owners", np.asarray(self.owners, dtype=np.int64)[order])
        object.__setattr__(self, "covariates", covariates)

    @property
    def n_footprints(self) -> int:
        return self.covariates.shape[0]

    @property
    def scales(self) -> np.ndarray:
        scales = self.covariates.std(axis=0)
        return np.where(scales > 0, scales, 1.0)

    def to_arrays(self) -> dict:
        return {"values": self.values, "owners": self.owners, "covariates": self.covariates}

    @classmethod
    def from_arrays(cls, arrays) -> "FootprintBank":
        return cls(np.asarray(arrays["values"]), np.asarray(arrays["owners"]), np.asarray(arrays["covariates"]))


def _footprint_samples(records: Sequence[WindstormRecord], tracks: Sequence[StormTrack],
                       exp_stacks: Dict[str, GriddedFieldStack]) -> Iterator[Tuple]:
    by_id = {track.id: track for track in tracks}
    for record in records:
        stack = exp_stacks.get(record.track_id)
        track = by_id.get(record.track_id)
        if stack is None or track is None:
            logger.warning(f"Sin campos o trayectoria para {record.track_id}: se omite")
            continue
        for t in sorted(record.footprints):
            footprint = record.footprints[t]
            cells = footprint.ellipse.cells_inside(stack.grid.shape)
            if cells.shape[0] == 0:
                continue
            values = stack.raster(t)[cells[:, 1], cells[:, 0]]
            finite = np.isfinite(values)
            if finite.any():
                yield footprint.features, track.point(t).vorticity, cells[finite], values[finite]


def build_footprint_bank(records: Sequence[WindstormRecord], tracks: Sequence[StormTrack],
                         exp_stacks: Dict[str, GriddedFieldStack]) -> FootprintBank:
    values, owners, covariates = [], [], []
    for features, omega, _, sample in _footprint_samples(records, tracks, exp_stacks):
        owners.append(np.full(sample.size, len(covariates)))
        values.append(sample)
        covariates.append((features.w, features.delta, omega))
    if not covariates:
        raise FitError("No hay huellas con valores para el banco de distribuciones")
    logger.info(f"Banco de huellas: {len(covariates)} huellas, {sum(v.size for v in values)} valores")
    return FootprintBank(np.concatenate(values), np.concatenate(owners), np.asarray(covariates))


def fit_footprint_distribution(bank: FootprintBank, w: float, delta: float, omega: float,
                               bandwidth: float = 0.5, lower_quantile: float = 0.001,
                               counters: Optional[Counter] = None) -> FootprintDistribution:
    """D~_t: valores del banco ponderados por un núcleo gaussiano en (W, Delta, Omega) estandarizados"""
    if not bandwidth > 0:
        raise ValueError(f"Ancho de banda no positivo: {bandwidth}")
    z = (bank.covariates - np.array([w, delta, omega])) / (bandwidth * bank.scales)
    kernel = np.exp(-0.5 * (z ** 2).sum(axis=1))
    if kernel.sum() == 0:
        if counters is not None:
            counters["bank_nearest"] += 1
        kernel = np.zeros(bank.n_footprints)
        kernel[int(np.argmin((z ** 2).sum(axis=1)))] = 1.0
    return FootprintDistribution.from_weighted_sample(bank.values, kernel[bank.owners], upper=w,
                                                      lower_quantile=lower_quantile)


# Range model

@dataclass(frozen=True, eq=False)
class AlphaModel:
    """KDE de (alpha, Delta) para muestrear alpha_t | Delta_t"""
    kde: KdeModel

    def sample(self, delta: float, rng: np.random.Generator, counters: Optional[Counter] = None) -> float:
        cond_dims = self.kde.dims("delta")
        for _ in range(MAX_REDRAWS):
            alpha = float(conditional_sample(self.kde, cond_dims, [delta], rng, counters=counters)[0])
            if alpha > 0:
                return alpha
        if counters is not None:
            counters["alpha_fix"] += 1
        alphas = self.kde.data[:, self.kde.dims("alpha")[0]]
        return float(alphas[alphas > 0].min())


def normal_scores(values) -> np.ndarray:
    """Transformación gaussiana con la CDF empírica propia de la huella"""
    values = np.asarray(values, dtype=float)
    return norm.ppf(rankdata(values) / (values.size + 1))


def fit_alpha_model(records: Sequence[WindstormRecord], tracks: Sequence[StormTrack],
                    exp_stacks: Dict[str, GriddedFieldStack], config: WindfieldSection,
                    kde_config: KdeSection) -> AlphaModel:
    pairs = []
    skipped = 0
    for features, _, cells, values in _footprint_samples(records, tracks, exp_stacks):
        if values.size < config.min_variogram_cells:
            skipped += 1
            continue
        try:
            alpha = estimate_alpha(normal_scores(values), cells, features.theta_e,
                                   max(features.a / features.b, 1.0), config.kappa, config.variogram_bins,
                                   config.min_variogram_cells, config.variogram_max_cells,
                                   config.scale_then_rotate)
        except FitError as e:
            logger.debug(f"t={features.t}: alpha no estimado ({e})")
            skipped += 1
            continue
        pairs.append((alpha, features.delta))
    if len(pairs) < 2:
        raise FitError(f"Insuficientes huellas para el modelo de alcance: {len(pairs)}")
    if skipped:
        logger.info(f"{skipped} huellas omitidas en el ajuste de alcance")
    kde = build_kde(np.asarray(pairs), kde_config.factor, kde_config.oriented, (), ("alpha", "delta"))
    logger.info(f"Modelo de alcance ajustado con {len(pairs)} huellas")
    return AlphaModel(kde)


# Gaussian field simulation

def _cholesky(matrix: np.ndarray, jitter: float) -> np.ndarray:
    try:
        return cholesky(matrix, lower=True)
    except LinAlgError:
        logger.debug(f"Covarianza singular: se añade jitter {jitter:g}")
    try:
        return cholesky(matrix + jitter * np.eye(matrix.shape[0]), lower=True)
    except LinAlgError:
        raise SimulationError("Covarianza de condicionamiento singular incluso con jitter")


def _cho_factor(matrix: np.ndarray, jitter: float):
    try:
        return cho_factor(matrix, lower=True)
    except LinAlgError:
        logger.debug(f"Covarianza condicionante singular: se añade jitter {jitter:g}")
    try:
        return cho_factor(matrix + jitter * np.eye(matrix.shape[0]), lower=True)
    except LinAlgError:
        raise SimulationError("Covarianza de condicionamiento singular incluso con jitter")


def _exact_field(cells: np.ndarray, gp: GpParams, rng: np.random.Generator,
                 conditions: Optional[Tuple[np.ndarray, np.ndarray]], jitter: float) -> np.ndarray:
    n = cells.shape[0]
    if conditions is None or len(conditions[0]) == 0:
        chol = _cholesky(gp.correlation(cells, cells), jitter)
        return chol @ rng.standard_normal(n)
    idx = np.asarray(conditions[0], dtype=np.int64)
    fixed = np.asarray(conditions[1], dtype=float)
    out = np.empty(n)
    out[idx] = fixed
    free = np.setdiff1d(np.arange(n), idx)
    if free.size == 0:
        return out
    factor = _cho_factor(gp.correlation(cells[idx], cells[idx]), jitter)
    cross = gp.correlation(cells[free], cells[idx])
    gain = cho_solve(factor, cross.T)
    covariance = gp.correlation(cells[free], cells[free]) - cross @ gain
    chol = _cholesky(0.5 * (covariance + covariance.T), jitter)
    out[free] = gain.T @ fixed + chol @ rng.standard_normal(free.size)
    return out


def _coarse_field(cells: np.ndarray, gp: GpParams, rng: np.random.Generator,
                  conditions: Optional[Tuple[np.ndarray, np.ndarray]], jitter: float,
                  max_cells: int) -> np.ndarray:
    low, high = cells.min(axis=0), cells.max(axis=0)
    span = high - low + 1
    stride = max(2, math.ceil(math.sqrt(span[0] * span[1] / max_cells)))
    xs = np.arange(low[0], high[0] + stride, stride, dtype=float)
    ys = np.arange(low[1], high[1] + stride, stride, dtype=float)
    lattice = np.column_stack([g.ravel() for g in np.meshgrid(xs, ys)])
    coarse_conditions = None
    if conditions is not None and len(conditions[0]) > 0:
        idx = np.asarray(conditions[0], dtype=np.int64)
        fixed = np.asarray(conditions[1], dtype=float)
        _, nearest = cKDTree(lattice).query(cells[idx])
        unique, inverse = np.unique(nearest, return_inverse=True)
        means = np.bincount(inverse, weights=fixed) / np.bincount(inverse)
        coarse_conditions = (unique, means)
    values = _exact_field(lattice, gp, rng, coarse_conditions, jitter)
    interpolator = RegularGridInterpolator((ys, xs), values.reshape(ys.size, xs.size))
    out = interpolator(cells[:, ::-1].astype(float))
    if conditions is not None and len(conditions[0]) > 0:
        out[np.asarray(conditions[0], dtype=np.int64)] = conditions[1]
    return out


def simulate_gaussian_field(cells, gp: GpParams, rng: np.random.Generator,
                            conditions: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                            jitter: float = 1e-8, exact_max_cells: int = 20000) -> np.ndarray:
    """Campo gaussiano Matérn anisótropo de varianza 1, condicionado por kriging si se indica"""
    cells = np.asarray(cells, dtype=float)
    if cells.ndim != 2 or cells.shape[1] != 2 or cells.shape[0] == 0:
        raise ValueError(f"Celdas inválidas: {cells.shape}")
    if cells.shape[0] <= exact_max_cells:
        return _exact_field(cells, gp, rng, conditions, jitter)
    logger.debug(f"{cells.shape[0]} celdas: simulación en retícula gruesa")
    return _coarse_field(cells, gp, rng, conditions, jitter, exact_max_cells)


def _low_cells(ellipse: Ellipse, cells: np.ndarray, tree: cKDTree, i_max: int, storm_centre: np.ndarray,
               rng: np.random.Generator, config: WindfieldSection) -> np.ndarray:
    _, perimeter = tree.query(ellipse.boundary(config.perimeter_points))
    low = set(np.unique(perimeter).tolist())
    if ellipse.contains(storm_centre)[0]:
        a = max(config.min_region_a - rng.exponential(1.0 / config.min_region_rate), 1.0)
        b = max(config.min_region_b - rng.exponential(1.0 / config.min_region_rate), 1.0)
        _, _, gamma = ellipse.geometry()
        region = Ellipse.from_geometry(storm_centre, max(a, b), min(a, b), gamma)
        low.update(np.flatnonzero(region.contains(cells)).tolist())
    low.discard(i_max)
    return np.array(sorted(low), dtype=np.int64)


def simulate_conditional_field(ellipse: Ellipse, features: FootprintFeatures, gp: GpParams,
                               dist: FootprintDistribution, storm_centre, rng: np.random.Generator,
                               shape: Optional[Tuple[int, int]] = None,
                               config: Optional[WindfieldSection] = None,
                               counters: Optional[Counter] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Valores Exp(1) dentro de la elipse: máximo W en (R_W, Theta_W) y límite inferior en el perímetro
    y en la región de mínimo cerca del centro de la tormenta"""
    config = config or WindfieldSection()
    counters = counters if counters is not None else Counter()
    storm_centre = np.asarray(storm_centre, dtype=float)
    cells = ellipse.cells_inside(shape)
    if cells.shape[0] == 0:
        raise SimulationError(f"t={features.t}: la elipse no contiene celdas de la rejilla")
    tree = cKDTree(cells)
    _, i_max = tree.query(features.max_location(ellipse.centre))
    i_max = int(i_max)
    low = _low_cells(ellipse, cells, tree, i_max, storm_centre, rng, config)

    g_top = float(norm.ppf(dist.top_probability))
    g_low = float(norm.ppf(dist.cdf(dist.lower)))
    g_low = min(g_low, g_top)
    idx = np.r_[i_max, low]
    fixed = np.r_[g_top, np.full(low.size, g_low)]
    g = simulate_gaussian_field(cells, gp, rng, (idx, fixed), config.jitter, config.exact_max_cells)

    above, below = g > g_top, g < g_low
    above[i_max] = False
    if above.any():
        counters["max_repin"] += int(above.sum())
    counters["min_floor"] += int(below.sum())
    g = np.clip(g, g_low, g_top)
    values = np.maximum(dist.quantile(norm.cdf(g)), 0.0)
    values[i_max] = features.w
    return cells, values


def synthesize_windstorm_fields(record: WindstormRecord, track: StormTrack, alpha_model: AlphaModel,
                                bank: FootprintBank, marginal: MarginalModel, seed: int,
                                config: Optional[WindfieldSection] = None,
                                counters: Optional[Counter] = None) -> GriddedFieldStack:
    """Vientos en escala observada para cada paso activo; NaN fuera de las elipses"""
    config = config or WindfieldSection()
    counters = counters if counters is not None else Counter()
    grid = marginal.grid
    times = sorted(record.footprints)
    xs, ys = grid.lonlat_to_cell(track.lon, track.lat)
    exp_values = np.full((len(times),) + grid.shape, np.nan)
    for k, t in enumerate(times):
        footprint = record.footprints[t]
        features = footprint.features
        if footprint.ellipse.cells_inside(grid.shape).shape[0] == 0:
            counters["off_grid"] += 1
            continue
        rng = derive_rng(seed, "field", record.track_id, t)
        alpha = alpha_model.sample(features.delta, rng, counters)
        gp = GpParams.for_footprint(features, alpha, config)
        dist = fit_footprint_distribution(bank, features.w, features.delta, track.point(t).vorticity,
                                          config.footprint_bandwidth, config.lower_quantile, counters)
        cells, values = simulate_conditional_field(footprint.ellipse, features, gp, dist,
                                                   (xs[t - 1], ys[t - 1]), rng, grid.shape, config, counters)
        exp_values[k, cells[:, 1], cells[:, 0]] = values
    if counters["off_grid"]:
        logger.warning(f"Trayectoria {record.track_id}: {counters['off_grid']} huellas fuera de la rejilla")
    if counters["max_repin"]:
        logger.debug(f"Trayectoria {record.track_id}: {counters['max_repin']} celdas reajustadas al máximo")
    exp_stack = GriddedFieldStack(grid, np.asarray(times, dtype=np.int64), exp_values, ScaleTag.EXP1)
    return from_exp_margins(marginal, exp_stack)
