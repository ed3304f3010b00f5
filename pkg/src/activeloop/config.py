"""Experiment configuration: YAML in, validated dataclasses out."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .acquisition import AcquisitionOptions
from .alloop import TrainStrategy
from .evaluation import MatchConfig
from .synthetic import ClassSpec, SceneConfig, generate_dataset, zipf_classes

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def load_schema() -> dict:
    return json.loads(resources.files("activeloop").joinpath("config_schema.json").read_text())


def _apply_defaults(schema: dict, doc):
    """Fill omitted keys from schema ``default`` entries, recursively."""
    if schema.get("type") != "object" or not isinstance(doc, dict):
        return doc
    for key, sub in schema.get("properties", {}).items():
        if key not in doc and "default" in sub:
            doc[key] = copy.deepcopy(sub["default"])
        if key in doc:
            doc[key] = _apply_defaults(sub, doc[key])
    return doc


def schema_defaults() -> dict:
    return _apply_defaults(load_schema(), {"schema_version": SCHEMA_VERSION})


@dataclass(frozen=True)
class ScheduleParams:
    initial_count: int = 20
    per_round_count: int = 20
    final_fraction: float = 0.5
    sizes: tuple[int, ...] | None = None


@dataclass
class ExperimentConfig:
    scene: SceneConfig | None = None
    dataset_path: str | None = None
    records_path: str | None = None
    strategies: list[str] = field(default_factory=lambda: ["random", "entropy"])
    schedule: ScheduleParams = ScheduleParams()
    train: TrainStrategy = TrainStrategy()
    match: MatchConfig = MatchConfig()
    acquisition: dict = field(default_factory=dict)
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    strategy_seeds: dict[str, int] = field(default_factory=dict)
    output: str = "runs/default"

    @property
    def mc_passes(self) -> int:
        return int(self.acquisition.get("mc_passes", 10))

    @property
    def mc_drop_rate(self) -> float:
        return float(self.acquisition.get("mc_drop_rate", 0.3))

    def acquisition_options(self) -> AcquisitionOptions:
        a = dict(self.acquisition)
        a.pop("mc_passes", None)
        a.pop("mc_drop_rate", None)
        for key, scene_value in (("density_n0", "density_n0"), ("d0", "d0"), ("range_max", "range_max")):
            if a.get(key) is None:
                if self.scene is not None:
                    a[key] = getattr(self.scene, scene_value)
                elif key != "range_max":
                    a.pop(key, None)
        return AcquisitionOptions(**a)

    def load_frames(self):
        if self.scene is not None:
            return generate_dataset(self.scene)
        if self.dataset_path is not None:
            from .formats import read_dataset

            frames, _meta = read_dataset(self.dataset_path)
            return frames
        raise ConfigError("the loop needs ground truth: use a synthetic or directory dataset, "
                          "not an inference-records file")

    def num_classes(self, frames=None) -> int:
        if self.scene is not None:
            return self.scene.num_classes
        if self.dataset_path is not None:
            from .formats import read_dataset

            _frames, meta = read_dataset(self.dataset_path)
            if meta.get("classes"):
                return len(meta["classes"])
        if frames:
            return 1 + max((b.class_id for f in frames for b in f.gt_boxes), default=1)
        raise ConfigError("cannot determine the class count")


def scene_from_dict(d: dict, seed: int) -> SceneConfig:
    d = dict(d)
    num_classes = d.pop("num_classes", 4)
    zipf_s = d.pop("zipf_s", 1.0)
    d.setdefault("seed", seed)
    if "classes" in d:
        d["classes"] = tuple(ClassSpec(c["name"], tuple(c["dims"]), c.get("weight", 1.0),
                                       c.get("reflectance", 0.5)) for c in d["classes"])
    else:
        d["classes"] = zipf_classes(num_classes, zipf_s)
    d["objects_per_frame"] = tuple(d.get("objects_per_frame", (3, 8)))
    return SceneConfig(**d)


def from_dict(raw: dict) -> ExperimentConfig:
    doc = copy.deepcopy(raw)
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    doc.setdefault("schema_version", SCHEMA_VERSION)
    schema = load_schema()
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{loc}: {exc.message}") from exc
    doc = _apply_defaults(schema, doc)
    ds = doc["dataset"]
    try:
        scene = scene_from_dict(ds["synthetic"], doc["seed"]) if "synthetic" in ds else None
        sched = doc["schedule"]
        ev = doc["evaluation"]
        thr = ev["iou_threshold"]
        cfg = ExperimentConfig(
            scene=scene,
            dataset_path=ds.get("path"),
            records_path=ds.get("records"),
            strategies=list(doc["strategies"]),
            schedule=ScheduleParams(sched["initial_count"], sched["per_round_count"],
                                    sched["final_fraction"],
                                    tuple(sched["sizes"]) if sched["sizes"] else None),
            train=TrainStrategy(**doc["training"]),
            match=MatchConfig(ev["iou_kind"], tuple(thr) if isinstance(thr, list) else thr,
                              ev["recall_points"]),
            acquisition=dict(doc["acquisition"]),
            split=tuple(doc["split"]),
            seed=doc["seed"],
            strategy_seeds=dict(doc["strategy_seeds"]),
            output=doc["output"],
        )
        cfg.acquisition_options()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if abs(sum(cfg.split) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(raw or {})
