"""Softmax-linear surrogate detector over clustered LiDAR proposals.

The detector has two stages. ``propose`` clusters above-ground points on a
BEV occupancy grid and fits one oriented box per cluster. A multinomial
logistic model over eight handcrafted cluster features then classifies each
proposal into one of ``C`` foreground classes or background (index ``C``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Box3D, bev_iou, box_distance

FEATURE_NAMES = (
    "log_points", "length", "width", "height", "mean_z", "mean_reflectance",
    "bev_distance", "bev_area",
)
NUM_FEATURES = len(FEATURE_NAMES)
GROUND_Z = 0.2
MAX_CANDIDATES = 64
EXTENT_SCALE = 2.5
EXTENT_CLAMP = (0.3, 20.0)
MATCH_IOU = 0.3


@dataclass
class Candidate:
    box: Box3D
    feature: np.ndarray  # raw features; the model standardizes them
    point_count: int


@dataclass
class Detection:
    box: Box3D
    probs: np.ndarray
    objectness: float
    grad_embedding: np.ndarray
    point_count: int
    distance: float
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))
    score: float = 0.0

    @property
    def class_id(self) -> int:
        return self.box.class_id


@dataclass
class ModelState:
    num_classes: int
    weights: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    train_steps: int = 0
    candidate_visits: int = 0
    rng_stream_id: int = 0
    trained: bool = False

    @classmethod
    def fresh(cls, num_classes: int, rng_stream_id: int = 0) -> "ModelState":
        return cls(
            num_classes=num_classes,
            weights=np.zeros((num_classes + 1, NUM_FEATURES + 1)),
            feature_mean=np.zeros(NUM_FEATURES),
            feature_std=np.ones(NUM_FEATURES),
            rng_stream_id=rng_stream_id,
        )

    def copy(self) -> "ModelState":
        return ModelState(
            self.num_classes, self.weights.copy(), self.feature_mean.copy(),
            self.feature_std.copy(), self.train_steps, self.candidate_visits,
            self.rng_stream_id, self.trained,
        )

    def standardize(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64).reshape(-1, NUM_FEATURES)
        return (raw - self.feature_mean) / self.feature_std

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "weights": self.weights.tolist(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "train_steps": self.train_steps,
            "candidate_visits": self.candidate_visits,
            "rng_stream_id": self.rng_stream_id,
            "trained": self.trained,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelState":
        state = cls(
            num_classes=int(d["num_classes"]),
            weights=np.array(d["weights"], dtype=np.float64),
            feature_mean=np.array(d["feature_mean"], dtype=np.float64),
            feature_std=np.array(d["feature_std"], dtype=np.float64),
            train_steps=int(d["train_steps"]),
            candidate_visits=int(d["candidate_visits"]),
            rng_stream_id=int(d["rng_stream_id"]),
            trained=bool(d["trained"]),
        )
        expected = (state.num_classes + 1, NUM_FEATURES + 1)
        if state.weights.shape != expected:
            raise ValueError(f"checkpoint weights have shape {state.weights.shape}, expected {expected}")
        if np.any(state.feature_std <= 0) or not np.all(np.isfinite(state.weights)):
            raise ValueError("checkpoint has non-positive feature_std or non-finite weights")
        return state


# -- proposals ---------------------------------------------------------------

def _fit_box(pts: np.ndarray) -> Box3D:
    xy = pts[:, :2]
    centroid = xy.mean(axis=0)
    cov = np.cov((xy - centroid).T) if len(xy) > 1 else np.zeros((2, 2))
    evals, evecs = np.linalg.eigh(cov)
    major = evecs[:, 1]
    # sign convention keeps yaw deterministic for mirrored eigenvectors
    if major[0] < 0 or (major[0] == 0 and major[1] < 0):
        major = -major
    yaw = math.atan2(major[1], major[0])
    minor = np.array([-major[1], major[0]])
    proj_l = (xy - centroid) @ major
    proj_w = (xy - centroid) @ minor
    lo, hi = EXTENT_CLAMP
    length = float(np.clip(EXTENT_SCALE * proj_l.std(), lo, hi))
    width = float(np.clip(EXTENT_SCALE * proj_w.std(), lo, hi))
    zmin, zmax = float(pts[:, 2].min()), float(pts[:, 2].max())
    height = float(np.clip(zmax - zmin, lo, hi))
    return Box3D((centroid[0], centroid[1], 0.5 * (zmin + zmax)), (length, width, height), yaw)


def candidate_feature(box: Box3D, pts: np.ndarray) -> np.ndarray:
    l, w, h = box.dims
    return np.array([
        math.log1p(len(pts)), l, w, h,
        float(pts[:, 2].mean()), float(pts[:, 3].mean()),
        box_distance(box), l * w,
    ])


def occupancy_components(xy: np.ndarray, grid_cell: float) -> np.ndarray:
    """8-connected component label per point (0-based) on a BEV occupancy grid."""
    cells = np.floor(xy / grid_cell).astype(np.int64)
    origin = cells.min(axis=0)
    cells -= origin
    shape = tuple(cells.max(axis=0) + 1)
    grid = np.zeros(shape, dtype=bool)
    grid[cells[:, 0], cells[:, 1]] = True
    labels, _ = ndimage.label(grid, structure=np.ones((3, 3), dtype=int))
    return labels[cells[:, 0], cells[:, 1]] - 1


def propose(frame, grid_cell: float = 0.5, min_cluster_points: int = 5,
            ground_z: float = GROUND_Z) -> list[Candidate]:
    cloud = np.asarray(frame.cloud if hasattr(frame, "cloud") else frame, dtype=np.float64)
    if cloud.size == 0:
        return []
    pts = cloud[cloud[:, 2] > ground_z]
    if len(pts) == 0:
        return []
    comp = occupancy_components(pts[:, :2], grid_cell)
    counts = np.bincount(comp)
    keep = [c for c in range(len(counts)) if counts[c] >= min_cluster_points]
    # largest first, component index breaks ties
    keep.sort(key=lambda c: (-counts[c], c))
    out = []
    for c in keep[:MAX_CANDIDATES]:
        cluster = pts[comp == c]
        box = _fit_box(cluster)
        out.append(Candidate(box, candidate_feature(box, cluster), len(cluster)))
    return out


def assign_labels(candidates: list[Candidate], gt_boxes: list[Box3D], num_classes: int,
                  match_iou: float = MATCH_IOU) -> np.ndarray:
    """GT class of the best-overlapping box per candidate, background below ``match_iou``."""
    labels = np.full(len(candidates), num_classes, dtype=np.int64)
    for i, cand in enumerate(candidates):
        best, best_iou = None, 0.0
        for gt in gt_boxes:
            iou = bev_iou(cand.box, gt)
            if iou > best_iou:
                best, best_iou = gt, iou
        if best is not None and best_iou >= match_iou:
            labels[i] = best.class_id
    return labels


def training_arrays(frames, num_classes: int, cache: dict | None = None,
                    **propose_kw) -> tuple[np.ndarray, np.ndarray]:
    """Stack raw candidate features and labels from labeled frames.

    ``cache`` maps frame_id -> (features, labels) and is filled as a side effect.
    """
    xs, ys = [], []
    for f in frames:
        key = f.frame_id
        if cache is not None and key in cache:
            x, y = cache[key]
        else:
            cands = propose(f, **propose_kw)
            x = np.array([c.feature for c in cands]).reshape(-1, NUM_FEATURES)
            y = assign_labels(cands, f.gt_boxes, num_classes)
            if cache is not None:
                cache[key] = (x, y)
        xs.append(x)
        ys.append(y)
    if not xs:
        return np.zeros((0, NUM_FEATURES)), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys)


# -- model -------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def augment(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    return np.hstack([z, np.ones((len(z), 1))])


def loss_and_grad(weights: np.ndarray, xa: np.ndarray, y: np.ndarray,
                  l2: float = 1e-4) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus ``l2/2 * ||W||^2`` and its gradient.

    ``xa`` is the bias-augmented standardized feature matrix.
    """
    n = len(y)
    logits = xa @ weights.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), y])) + 0.5 * l2 * float(np.sum(weights**2))
    probs = np.exp(shifted - log_norm[:, None])
    probs[np.arange(n), y] -= 1.0
    grad = probs.T @ xa / n + l2 * weights
    return loss, grad


def train_arrays(model: ModelState, x_raw: np.ndarray, y: np.ndarray, epochs: int,
                 lr: float = 0.1, resume: bool = False, batch_size: int = 32,
                 l2: float = 1e-4, lr_decay: float = 0.95,
                 loss_history: list | None = None) -> ModelState:
    """Mini-batch gradient descent on raw features; returns a new state."""
    model = model.copy()
    if epochs <= 0:
        return model
    if len(y) == 0:
        raise ValueError("labeled pool produced zero training candidates")
    if not resume:
        model.feature_mean = x_raw.mean(axis=0)
        std = x_raw.std(axis=0)
        model.feature_std = np.where(std > 1e-9, std, 1.0)
    xa = augment(model.standardize(x_raw))
    n = len(y)
    rng = np.random.default_rng(np.random.SeedSequence([model.rng_stream_id, model.train_steps]))
    w = model.weights
    for epoch in range(epochs):
        step = lr * lr_decay**epoch
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, g = loss_and_grad(w, xa[idx], y[idx], l2)
            w = w - step * g
            model.train_steps += 1
        if loss_history is not None:
            loss_history.append(loss_and_grad(w, xa, y, l2)[0])
    model.weights = w
    model.candidate_visits += n * epochs
    model.trained = True
    return model


def train(model: ModelState, labeled, epochs: int, lr: float = 0.1, resume: bool = False,
          cache: dict | None = None, **kw) -> ModelState:
    x, y = training_arrays(labeled, model.num_classes, cache)
    if epochs > 0 and len(y) == 0:
        raise ValueError("labeled pool produced zero training candidates")
    return train_arrays(model, x, y, epochs, lr=lr, resume=resume, **kw)


def gradient_embedding(probs: np.ndarray, feature_aug: np.ndarray) -> np.ndarray:
    """Cross-entropy gradient w.r.t. the output weights at the argmax pseudo-label."""
    probs = np.asarray(probs, dtype=np.float64)
    residual = probs.copy()
    residual[int(np.argmax(probs))] -= 1.0
    return np.outer(residual, feature_aug).ravel()


def _detections(model: ModelState, candidates: list[Candidate], probs: np.ndarray,
                za: np.ndarray) -> list[Detection]:
    C = model.num_classes
    out = []
    for cand, p, a in zip(candidates, probs, za):
        cls = int(np.argmax(p[:C]))
        objectness = float(1.0 - p[C])
        out.append(Detection(
            box=cand.box.with_class(cls),
            probs=p,
            objectness=min(max(objectness, 0.0), 1.0),
            grad_embedding=gradient_embedding(p, a),
            point_count=cand.point_count,
            distance=box_distance(cand.box),
            feature=a[:-1].copy(),
            score=objectness * float(p[cls]),
        ))
    return out


def infer(model: ModelState, frame, candidates: list[Candidate] | None = None) -> list[Detection]:
    if candidates is None:
        candidates = propose(frame)
    if not candidates:
        return []
    za = augment(model.standardize(np.array([c.feature for c in candidates])))
    probs = softmax(za @ model.weights.T)
    return _detections(model, candidates, probs, za)


def infer_stochastic(model: ModelState, frame, passes: int = 10, drop_rate: float = 0.3,
                     candidates: list[Candidate] | None = None):
    """Detections plus per-pass probability arrays under feature dropout.

    Returns ``(detections, pass_probs)`` where ``pass_probs[i]`` has shape
    ``(passes, C + 1)`` for detection ``i``.
    """
    if not 0 <= drop_rate < 1:
        raise ValueError("drop_rate must be in [0, 1)")
    if candidates is None:
        candidates = propose(frame)
    dets = infer(model, frame, candidates)
    if not dets:
        return dets, []
    z = model.standardize(np.array([c.feature for c in candidates]))
    per_pass = []
    for p in range(passes):
        rng = np.random.default_rng(np.random.SeedSequence([model.rng_stream_id, frame.frame_id, p]))
        keep = rng.uniform(size=z.shape) >= drop_rate
        zp = np.where(keep, z / (1.0 - drop_rate), 0.0)
        per_pass.append(softmax(augment(zp) @ model.weights.T))
    stacked = np.stack(per_pass, axis=1)  # (detections, passes, C+1)
    return dets, [stacked[i] for i in range(len(dets))]
