from __future__ import annotations

from datetime import datetime, timezone
from pathlib import Path
from typing import TypeVar

from pydantic import BaseModel, ValidationError

from app.core.errors import StorageError
from app.schemas.reports import RunManifest

ModelT = TypeVar("ModelT", bound=BaseModel)


def write_json(model: BaseModel, path: str | Path) -> Path:
    """Field order follows the model; non-finite floats become null."""
    p = Path(path)
    payload = model.model_dump_json(indent=2) + "\n"
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(payload, encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write {p}: {e}") from e
    return p


def read_json(path: str | Path, model: type[ModelT]) -> ModelT:
    p = Path(path)
    try:
        return model.model_validate_json(p.read_text(encoding="utf-8"))
    except OSError as e:
        raise StorageError(f"cannot read {p}: {e}") from e
    except ValidationError as e:
        raise StorageError(f"{p.name} does not match {model.__name__}: {e.error_count()} errors") from e


def write_manifest(
    directory: str | Path,
    *,
    seeds: list[int],
    files: list[str],
    config_toml: str | None = None,
) -> Path:
    manifest = RunManifest(
        created_at=datetime.now(timezone.utc),
        seeds=sorted(seeds),
        config_toml=config_toml,
        files=sorted(files),
    )
    return write_json(manifest, Path(directory) / "manifest.json")
