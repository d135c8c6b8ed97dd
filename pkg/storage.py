import json
import logging
from importlib import metadata
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

from config import VERSION, RunConfig
from windstorm.utils import file_sha256

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "scikit-learn", "click", "cachetools")


def package_versions() -> Dict[str, str]:
    versions = {"windstorm": VERSION}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "desconocida"
    return versions


def input_hashes(paths: Sequence[Union[str, Path]]) -> Dict[str, str]:
    """sha256 de cada archivo de entrada; los directorios se recorren en orden"""
    hashes = {}
    for path in paths:
        path = Path(path)
        if path.is_dir():
            for child in sorted(p for p in path.rglob("*") if p.is_file()):
                hashes[child.as_posix()] = file_sha256(child)
        elif path.exists():
            hashes[path.as_posix()] = file_sha256(path)
        else:
            raise FileNotFoundError(f"No existe la entrada: {path}")
    return hashes


class RunStore:
    """Directorio de salida de una ejecución, con su manifiesto reproducible"""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        path = self.directory / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_manifest(self, command: str, config: RunConfig, inputs: Sequence[Union[str, Path]] = (),
                       extra: Optional[Dict] = None) -> Path:
        manifest = {
            "command": command,
            "seed": config.run.seed,
            "config": config.to_ini(),
            "config_sha256": config.digest(),
            "inputs": input_hashes(inputs),
            "versions": package_versions(),
        }
        if extra:
            manifest.update(extra)
        path = self.path(MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(manifest, handle, indent=1, sort_keys=True)
        logger.info(f"Manifiesto escrito en {path}")
        return path
