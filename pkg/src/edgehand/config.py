"""JSON configuration: strict section parsing and the hashes exchanged at registration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .kinematics import GEOMETRY_VERSION, CameraIntrinsics, HandGeometry
from .objective import ObjectiveConfig
from .pso import PsoConfig


class ConfigError(ValueError):
    pass


def from_dict(cls, data, section: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {section or cls.__name__!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {section or cls.__name__!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section or cls.__name__!r}: {exc}") from exc


def check_keys(data: dict, allowed, section: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {', '.join(unknown)}")


@dataclass(frozen=True)
class Settings:
    """Everything both executors must agree on to produce identical results."""

    geometry: HandGeometry = field(default_factory=HandGeometry)
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    pso: PsoConfig = field(default_factory=PsoConfig)

    @classmethod
    def from_sections(cls, data: dict) -> "Settings":
        kin = data.get("kinematics") or {}
        check_keys(kin, ("geometry", "camera"), "kinematics")
        return cls(
            geometry=from_dict(HandGeometry, kin.get("geometry"), "kinematics.geometry"),
            camera=from_dict(CameraIntrinsics, kin.get("camera"), "kinematics.camera"),
            objective=from_dict(ObjectiveConfig, data.get("objective"), "objective"),
            pso=from_dict(PsoConfig, data.get("pso"), "pso"),
        )

    def with_seed(self, seed: int) -> "Settings":
        return dataclasses.replace(self, pso=dataclasses.replace(self.pso, seed=seed))


def _digest(obj) -> bytes:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).digest()


def geometry_hash(settings: Settings) -> bytes:
    return _digest({
        "version": GEOMETRY_VERSION,
        "geometry": settings.geometry.to_dict(),
        "camera": settings.camera.to_dict(),
    })


def config_hash(settings: Settings) -> bytes:
    """Hash of the optimizer setup; the seed travels per request so it is excluded."""
    pso = dataclasses.asdict(settings.pso)
    pso.pop("seed")
    pso["init_extents"] = list(pso["init_extents"])
    return _digest({"objective": dataclasses.asdict(settings.objective), "pso": pso})


def load_json(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data
