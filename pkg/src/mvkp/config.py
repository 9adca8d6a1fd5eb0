"""Run configuration: a TOML file with [simulator], [solver], [metrics] and [object]."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigInvalid
from .metrics import METRICS
from .simulator import KeypointModel, SceneConfig
from .solver import SolverConfig
from .symmetry import SymmetryGroup


@dataclass
class RunConfig:
    simulator: SceneConfig = field(default_factory=SceneConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    metrics: list = field(default_factory=lambda: list(METRICS))
    scenes: int = 1
    object: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "simulator": self.simulator.to_dict(),
            "solver": self.solver.to_dict(),
            "metrics": {"metrics": list(self.metrics)},
            "scenes": self.scenes,
            "object": self.object,
        }

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def model(self):
        return build_model(self.simulator.object, self.simulator.keypoints, self.object)


def build_model(shape, n_keypoints, object_cfg=None):
    object_cfg = object_cfg or {}
    model = KeypointModel.builtin(shape, n_keypoints, symmetric=object_cfg.get("symmetric", True))
    if "symmetry" in object_cfg:
        group = SymmetryGroup.from_config(object_cfg["symmetry"])
        model = KeypointModel(model.name, model.model_points, model.keypoints, group, model.diameter)
    return model


def parse_config(data):
    data = dict(data)
    unknown = set(data) - {"simulator", "solver", "metrics", "object"}
    if unknown:
        raise ConfigInvalid(f"unknown config sections {sorted(unknown)}")
    sim = dict(data.get("simulator", {}))
    scenes = sim.pop("scenes", 1)
    if not isinstance(scenes, int) or scenes < 1:
        raise ConfigInvalid("simulator.scenes: must be a positive integer")
    sim_cfg = SceneConfig.from_dict(sim)
    solver_cfg = SolverConfig.from_dict(dict(data.get("solver", {})))
    metrics = list(data.get("metrics", {}).get("metrics", METRICS))
    for m in metrics:
        if m not in METRICS:
            raise ConfigInvalid(f"metrics.metrics: unknown metric {m!r}")
    obj = dict(data.get("object", {}))
    bad = set(obj) - {"symmetry", "symmetric"}
    if bad:
        raise ConfigInvalid(f"object: unknown keys {sorted(bad)}")
    if "symmetry" in obj:
        try:
            SymmetryGroup.from_config(obj["symmetry"])
        except (ConfigInvalid, ValueError) as exc:
            raise ConfigInvalid(f"object.symmetry: {exc}") from None
    return RunConfig(sim_cfg, solver_cfg, metrics, scenes, obj)


def config_from_dict(d):
    """Inverse of ``RunConfig.to_dict`` (as embedded in scene files)."""
    try:
        sim = dict(d["simulator"])
        sim["scenes"] = d.get("scenes", 1)
        data = {"simulator": sim, "solver": d.get("solver", {}), "metrics": d.get("metrics", {}), "object": d.get("object", {})}
    except (KeyError, TypeError) as exc:
        raise ConfigInvalid(f"embedded config: {exc}") from None
    return parse_config(data)


def load_config(path):
    """Parse a TOML run config; a missing path gives the defaults."""
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from None
    return parse_config(data)
