"""Deterministic synthetic LiDAR scenes with class skew and range-dependent density."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box3D, box_distance

# frame point columns
POINT_COLUMNS = ("x", "y", "z", "reflectance")
CLUTTER = -1


@dataclass(frozen=True)
class ClassSpec:
    name: str
    dims: tuple[float, float, float]
    weight: float = 1.0
    reflectance: float = 0.5


DEFAULT_CLASSES = (
    ClassSpec("car", (4.5, 1.9, 1.6), reflectance=0.55),
    ClassSpec("pedestrian", (0.7, 0.7, 1.8), reflectance=0.35),
    ClassSpec("cyclist", (1.8, 0.8, 1.7), reflectance=0.45),
    ClassSpec("truck", (8.0, 2.6, 3.2), reflectance=0.7),
    ClassSpec("bus", (11.5, 2.9, 3.4), reflectance=0.8),
)


def zipf_weights(num_classes: int, s: float = 1.0) -> list[float]:
    raw = [1.0 / (k + 1) ** s for k in range(num_classes)]
    total = sum(raw)
    return [r / total for r in raw]


def zipf_classes(num_classes: int = 4, s: float = 1.0,
                 base: Sequence[ClassSpec] = DEFAULT_CLASSES) -> tuple[ClassSpec, ...]:
    """First ``num_classes`` of ``base`` reweighted by a Zipf(s) law."""
    if num_classes > len(base):
        raise ValueError(f"only {len(base)} base classes available")
    weights = zipf_weights(num_classes, s)
    return tuple(
        ClassSpec(c.name, c.dims, w, c.reflectance) for c, w in zip(base[:num_classes], weights)
    )


@dataclass(frozen=True)
class SceneConfig:
    num_sequences: int = 20
    frames_per_sequence: int = 10
    classes: tuple[ClassSpec, ...] = field(default_factory=lambda: zipf_classes(4, 1.0))
    objects_per_frame: tuple[int, int] = (3, 8)
    range_max: float = 30.0
    density_n0: float = 1000.0
    d0: float = 10.0
    noise_sigma: float = 0.03
    clutter_points: int = 300
    dim_jitter: float = 0.1
    max_speed: float = 0.5
    seed: int = 0

    def __post_init__(self):
        classes = tuple(c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes)
        classes = tuple(
            ClassSpec(c.name, tuple(float(d) for d in c.dims), float(c.weight), float(c.reflectance))
            for c in classes
        )
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "objects_per_frame", tuple(int(v) for v in self.objects_per_frame))
        self.validate()

    def validate(self):
        if len(self.classes) < 2:
            raise ValueError("scene needs at least two classes")
        if any(c.weight <= 0 for c in self.classes):
            raise ValueError("class frequency weights must be positive")
        if any(min(c.dims) <= 0 for c in self.classes):
            raise ValueError("class dims must be positive")
        if self.d0 <= 0:
            raise ValueError("d0 must be positive")
        if self.frames_per_sequence < 1 or self.num_sequences < 1:
            raise ValueError("need at least one sequence and one frame per sequence")
        lo, hi = self.objects_per_frame
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects_per_frame range {self.objects_per_frame}")
        if self.range_max <= 0 or self.noise_sigma < 0 or self.clutter_points < 0:
            raise ValueError("range_max must be positive; noise and clutter non-negative")
        if not 0 <= self.dim_jitter < 1:
            raise ValueError("dim_jitter must be in [0, 1)")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(ClassSpec(**c) if isinstance(c, dict) else c for c in d["classes"])
        if "objects_per_frame" in d:
            d["objects_per_frame"] = tuple(d["objects_per_frame"])
        return cls(**d)


@dataclass
class Frame:
    frame_id: int
    sequence_id: int
    index_in_sequence: int
    cloud: np.ndarray
    gt_boxes: list[Box3D]
    point_owner: np.ndarray | None = None
    track_ids: list[int] = field(default_factory=list)
    velocities: np.ndarray | None = None

    def __post_init__(self):
        self.cloud = np.asarray(self.cloud, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(self.cloud)):
            raise ValueError(f"frame {self.frame_id}: non-finite point coordinates")
        if self.point_owner is None:
            self.point_owner = np.full(len(self.cloud), CLUTTER, dtype=np.int64)
        self.point_owner = np.asarray(self.point_owner, dtype=np.int64)
        if self.velocities is None:
            self.velocities = np.zeros((len(self.gt_boxes), 2))
        self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 2)
        if not self.track_ids:
            self.track_ids = list(range(len(self.gt_boxes)))


def expected_point_count(distance: float, density_n0: float, d0: float) -> float:
    """Inverse-square return count, flat inside the reference distance."""
    return density_n0 * (d0 / max(distance, d0)) ** 2


def _face_table(dims):
    l, w, h = dims
    # (axis fixed, sign, area); bottom face omitted (sits on the ground)
    return [(0, 1, w * h), (0, -1, w * h), (1, 1, l * h), (1, -1, l * h), (2, 1, l * w)]


def sample_surface_points(rng: np.random.Generator, box: Box3D, count: int,
                          noise_sigma: float, reflectance: float) -> np.ndarray:
    """Points on the visible faces of ``box`` with 3-sigma-truncated noise in the box frame."""
    if count <= 0:
        return np.zeros((0, 4))
    half = np.array(box.dims) / 2
    faces = _face_table(box.dims)
    areas = np.array([f[2] for f in faces])
    which = rng.choice(len(faces), size=count, p=areas / areas.sum())
    local = rng.uniform(-1.0, 1.0, size=(count, 3)) * half
    for i, (axis, sign, _) in enumerate(faces):
        sel = which == i
        local[sel, axis] = sign * half[axis]
    if noise_sigma > 0:
        noise = np.clip(rng.normal(0.0, noise_sigma, size=(count, 3)),
                        -3 * noise_sigma, 3 * noise_sigma)
        local += noise
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty((count, 4))
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.center[0]
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.center[1]
    world[:, 2] = local[:, 2] + box.center[2]
    world[:, 3] = np.clip(reflectance + rng.normal(0.0, 0.05, size=count), 0.0, 1.0)
    return world


def object_points(rng: np.random.Generator, box: Box3D, cfg: SceneConfig,
                  reflectance: float) -> np.ndarray:
    lam = expected_point_count(box_distance(box), cfg.density_n0, cfg.d0)
    return sample_surface_points(rng, box, int(rng.poisson(lam)), cfg.noise_sigma, reflectance)


def sequence_rng(seed: int, sequence_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(sequence_id)]))


def _uniform_disk(rng, radius):
    r = radius * math.sqrt(rng.uniform())
    a = rng.uniform(-math.pi, math.pi)
    return r * math.cos(a), r * math.sin(a)


def generate_sequence(cfg: SceneConfig, sequence_id: int) -> list[Frame]:
    rng = sequence_rng(cfg.seed, sequence_id)
    T = cfg.frames_per_sequence
    weights = np.array([c.weight for c in cfg.classes])
    weights = weights / weights.sum()
    lo, hi = cfg.objects_per_frame
    n_objects = int(rng.integers(lo, hi + 1))
    steps = np.arange(T, dtype=np.float64)[:, None]

    objects = []  # (class_id, dims, yaw, start xy, velocity, trajectory, radius)
    for _ in range(n_objects):
        cls = int(rng.choice(len(cfg.classes), p=weights))
        spec = cfg.classes[cls]
        jitter = 1.0 + cfg.dim_jitter * np.clip(rng.normal(size=3), -2, 2)
        dims = tuple(float(d) for d in np.asarray(spec.dims) * jitter)
        yaw = float(rng.uniform(-math.pi, math.pi))
        speed = float(rng.uniform(0.0, cfg.max_speed))
        vel = np.array([speed * math.cos(yaw), speed * math.sin(yaw)])
        radius = 0.5 * math.hypot(dims[0], dims[1])
        placed = None
        for _attempt in range(100):
            start = np.array(_uniform_disk(rng, cfg.range_max))
            traj = start + steps * vel
            if np.any(np.hypot(traj[:, 0], traj[:, 1]) > cfg.range_max):
                continue
            if any(np.any(np.hypot(*(traj - o[5]).T) <= radius + o[6] + 0.2) for o in objects):
                continue
            placed = (cls, dims, yaw, start, vel, traj, radius)
            break
        if placed is not None:
            objects.append(placed)

    frames = []
    for t in range(T):
        chunks, owners, boxes = [], [], []
        for k, (cls, dims, yaw, start, vel, traj, _r) in enumerate(objects):
            center = start + vel * t
            box = Box3D((center[0], center[1], dims[2] / 2), dims, yaw, cls)
            pts = object_points(rng, box, cfg, cfg.classes[cls].reflectance)
            boxes.append(box)
            chunks.append(pts)
            owners.append(np.full(len(pts), k, dtype=np.int64))
        n_clutter = cfg.clutter_points
        if n_clutter:
            r = cfg.range_max * np.sqrt(rng.uniform(size=n_clutter))
            a = rng.uniform(-math.pi, math.pi, size=n_clutter)
            z = np.clip(rng.normal(0.0, cfg.noise_sigma, size=n_clutter),
                        -3 * cfg.noise_sigma, 3 * cfg.noise_sigma)
            refl = rng.uniform(0.0, 0.3, size=n_clutter)
            chunks.append(np.column_stack([r * np.cos(a), r * np.sin(a), z, refl]))
            owners.append(np.full(n_clutter, CLUTTER, dtype=np.int64))
        cloud = np.concatenate(chunks) if chunks else np.zeros((0, 4))
        owner = np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64)
        frames.append(Frame(
            frame_id=sequence_id * T + t,
            sequence_id=sequence_id,
            index_in_sequence=t,
            cloud=cloud,
            gt_boxes=boxes,
            point_owner=owner,
            track_ids=list(range(len(objects))),
            velocities=np.array([o[4] for o in objects]).reshape(-1, 2),
        ))
    return frames


def generate_dataset(cfg: SceneConfig) -> list[Frame]:
    """All frames of all sequences, ordered by frame id.

    Each sequence draws from its own stream seeded by ``(seed, sequence_id)``,
    so sequences can be produced in any order with identical results.
    """
    frames = []
    for s in range(cfg.num_sequences):
        frames.extend(generate_sequence(cfg, s))
    return frames


def label_histogram(labels: Iterable[int], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for c in labels:
        if 0 <= c < num_classes:
            counts[c] += 1
    return counts


def class_histogram(frames: Iterable, num_classes: int) -> np.ndarray:
    """Per-class box counts over frames.

    Accepts :class:`Frame` objects (ground truth) or plain sequences of boxes or
    detections (anything with ``class_id`` or ``box.class_id``).
    """
    labels = []
    for item in frames:
        boxes = item.gt_boxes if isinstance(item, Frame) else item
        for b in boxes:
            labels.append(b.class_id if hasattr(b, "class_id") else b.box.class_id)
    return label_histogram(labels, num_classes)
