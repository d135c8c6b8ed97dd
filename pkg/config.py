import configparser
import hashlib
import io
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from windstorm.errors import ConfigError

load_dotenv()

# Entorno
CONFIG_PATH = os.getenv("WINDSTORM_CONFIG")
LOG_LEVEL = os.getenv("WINDSTORM_LOG_LEVEL", "INFO")
DEFAULT_THREADS = int(os.getenv("WINDSTORM_THREADS", "1"))
DEFAULT_SEED = int(os.getenv("WINDSTORM_SEED", "20190101"))
ENV_PREFIX = "WINDSTORM__"

VERSION = "1.0.0"


@dataclass(frozen=True)
class RunSection:
    seed: int = DEFAULT_SEED
    threads: int = DEFAULT_THREADS


@dataclass(frozen=True)
class CorpusSection:
    n_x: int = 128
    n_y: int = 128
    cell_size: float = 25.0
    origin_lon: float = -30.0
    origin_lat: float = 40.0
    n_tracks: int = 50
    mean_track_length: int = 24
    quiet_steps: int = 600
    background_scale: float = 8.0
    background_contrast: float = 0.35
    noise_sigma: float = 2.0
    band_boost: float = 22.0
    band_a: float = 20.0
    band_b: float = 12.0
    band_offset: float = 9.0
    activation_vorticity: float = 0.45


@dataclass(frozen=True)
class MarginsSection:
    quantile: float = 0.98
    min_excess: int = 30
    exp_cap: float = 20.0
    max_nodes: int = 128


@dataclass(frozen=True)
class ExtractSection:
    v: float = 2.0
    sigma_space: float = 4.0
    sigma_time: float = 1.0
    eps: float = 1.5
    min_pts: int = 5
    r_max: float = 100.0
    area_min: float = 10.0
    window_km: float = 1600.0
    mvee_tol: float = 1e-4


@dataclass(frozen=True)
class KdeSection:
    factor: float = 1.0
    oriented: bool = True


@dataclass(frozen=True)
class ActivitySection:
    n_knots: int = 10
    n_lambda: int = 15
    lambda_min: float = 1e-3
    lambda_max: float = 1e4
    min_observations: int = 200
    max_iter: int = 100


@dataclass(frozen=True)
class FootprintSection:
    order: int = 2
    window_lon: float = 20.0
    window_lat: float = 14.0
    min_window_tuples: int = 30
    max_rejections: int = 100
    refit_backward: bool = False


@dataclass(frozen=True)
class WindfieldSection:
    kappa: float = 0.6
    lower_quantile: float = 0.001
    min_region_a: float = 40.0
    min_region_b: float = 35.0
    min_region_rate: float = 0.05
    perimeter_points: int = 720
    exact_max_cells: int = 20000
    jitter: float = 1e-8
    variogram_bins: int = 15
    variogram_max_cells: int = 2000
    min_variogram_cells: int = 200
    footprint_bandwidth: float = 0.5
    scale_then_rotate: bool = False


@dataclass(frozen=True)
class AnalysisSection:
    run_length: int = 6
    storms_per_year: float = 811.0
    n_bootstrap: int = 500
    density_sigma: float = 1.0


_SECTIONS = {
    "run": RunSection,
    "corpus": CorpusSection,
    "margins": MarginsSection,
    "extract": ExtractSection,
    "kde": KdeSection,
    "activity": ActivitySection,
    "footprint": FootprintSection,
    "windfield": WindfieldSection,
    "analysis": AnalysisSection,
}


def _coerce(raw: str, target: Any, where: str) -> Any:
    try:
        if target is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return target(raw.strip())
    except ValueError:
        raise ConfigError(f"Valor inválido para {where}: {raw!r}")


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    margins: MarginsSection = field(default_factory=MarginsSection)
    extract: ExtractSection = field(default_factory=ExtractSection)
    kde: KdeSection = field(default_factory=KdeSection)
    activity: ActivitySection = field(default_factory=ActivitySection)
    footprint: FootprintSection = field(default_factory=FootprintSection)
    windfield: WindfieldSection = field(default_factory=WindfieldSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    @classmethod
    def from_mapping(cls, values: Dict[str, Dict[str, str]]) -> "RunConfig":
        """Construye la configuración validando secciones y claves"""
        sections = {}
        for name, section_cls in _SECTIONS.items():
            raw = values.get(name, {})
            known = {f.name: f for f in fields(section_cls)}
            unknown = set(raw) - set(known)
            if unknown:
                raise ConfigError(f"Claves desconocidas en [{name}]: {sorted(unknown)}")
            kwargs = {
                key: _coerce(text, type(getattr(section_cls(), key)), f"{name}.{key}")
                for key, text in raw.items()
            }
            sections[name] = section_cls(**kwargs)
        extra = set(values) - set(_SECTIONS)
        if extra:
            raise ConfigError(f"Secciones desconocidas: {sorted(extra)}")
        return cls(**sections)

    def with_overrides(self, section: str, **values: Any) -> "RunConfig":
        if section not in _SECTIONS:
            raise ConfigError(f"Sección desconocida: {section}")
        return replace(self, **{section: replace(getattr(self, section), **values)})

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name in _SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: repr(getattr(section, f.name)) for f in fields(section)}
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()


def _read_ini(path: Path) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except configparser.Error as e:
        raise ConfigError(f"Archivo de configuración mal formado {path}: {e}")
    return {name: dict(parser[name]) for name in parser.sections()}


def _env_overrides(values: Dict[str, Dict[str, str]]) -> Dict[str, Dict[str, str]]:
    merged = {name: dict(items) for name, items in values.items()}
    for key, value in os.environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        if len(parts) != 2:
            raise ConfigError(f"Variable de entorno mal formada: {key}")
        section, name = parts
        merged.setdefault(section, {})[name] = value
    return merged


def load_config(path: Optional[Path] = None) -> RunConfig:
    """Carga la configuración del archivo INI y aplica los overrides del entorno"""
    path = path or (Path(CONFIG_PATH) if CONFIG_PATH else None)
    values: Dict[str, Dict[str, str]] = {}
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"No existe el archivo de configuración: {path}")
        values = _read_ini(Path(path))
    return RunConfig.from_mapping(_env_overrides(values))
