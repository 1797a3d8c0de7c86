"""Dataset manifests: a JSON index of sample grids and their computed properties."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, FormatError
from .fileio import atomic_write_json

SCHEMA_VERSION = 1
PROVENANCE = ("generated", "subsampled", "designed")


@dataclass
class Manifest:
    path: Path
    samples: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @property
    def root(self) -> Path:
        return self.path.parent

    def grid_path(self, entry: dict) -> Path:
        return self.root / entry["grid"]

    def ids(self) -> list[str]:
        return [e["id"] for e in self.samples]

    def by_id(self, sid: str) -> dict:
        for e in self.samples:
            if e["id"] == sid:
                return e
        raise KeyError(f"no sample {sid!r} in {self.path}")

    def validate(self, check_files: bool = True) -> None:
        ids = self.ids()
        if len(set(ids)) != len(ids):
            raise FormatError(f"{self.path}: duplicate sample ids")
        for e in self.samples:
            if e.get("provenance") not in PROVENANCE:
                raise FormatError(f"{self.path}: sample {e.get('id')} has unknown provenance {e.get('provenance')!r}")
            if check_files and not self.grid_path(e).is_file():
                raise FileNotFoundError(f"{self.grid_path(e)} (sample {e['id']}) does not exist")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "root": ".",
            "config": self.config,
            "samples": self.samples,
        }

    def save(self) -> None:
        atomic_write_json(self.path, self.to_dict())

    @classmethod
    def load(cls, path, check_files: bool = True) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest {path} does not exist")
        try:
            d = json.loads(path.read_text())
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if d.get("schema_version") != SCHEMA_VERSION:
            raise FormatError(f"{path}: unsupported schema version {d.get('schema_version')!r}")
        m = cls(path, list(d.get("samples", [])), dict(d.get("config", {})))
        m.validate(check_files)
        return m

    @classmethod
    def open_or_create(cls, path, config: dict) -> "Manifest":
        """Resume an existing manifest built with ``config``, or start an empty one."""
        path = Path(path)
        if path.exists():
            m = cls.load(path, check_files=False)
            if m.config != config:
                raise ConfigError(f"{path} was built with a different configuration; use a fresh --out")
            return m
        return cls(path, [], dict(config))
