"""
Run manifests: one JSON record per command invocation
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from intertwined import __version__
from intertwined.utils.errors import DataError

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "run_manifest.json"


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value


@dataclass
class RunManifest:
    """
    Subcommand, resolved options, seed and produced files of one run.

    ``command`` and ``options`` are enough to re-execute the run.
    """
    command: List[str]
    options: Dict[str, Any]
    seed: Optional[int]
    version: str = __version__
    started: str = field(default_factory=lambda: datetime.now().isoformat())
    finished: Optional[str] = None
    status: str = "running"
    error: Optional[str] = None
    artifacts: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        self.options = _jsonable(self.options)

    def add_artifact(self, path: Union[str, Path]) -> None:
        path = Path(path)
        if not path.exists():
            logger.warning(f"Artifact not found: {path}")
            return
        self.artifacts.append({
            "name": path.name,
            "path": str(path),
            "size": os.path.getsize(path) if path.is_file() else None,
            "type": path.suffix[1:] if path.suffix else ("dir" if path.is_dir() else "txt"),
        })

    def finish(self, status: str = "success", error: Optional[str] = None) -> None:
        self.finished = datetime.now().isoformat()
        self.status = status
        self.error = error

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        logger.info(f"Saved run manifest: {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunManifest":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
            return cls(**payload)
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise DataError(f"Cannot read run manifest {path}: {e}") from e


def default_manifest_path(base_dir: Union[str, Path], command: List[str]) -> Path:
    stamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
    return Path(base_dir) / "runs" / f"{'-'.join(command)}_{stamp}.json"
