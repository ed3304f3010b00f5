"""Query strategies: scalar uncertainty scores, CoreSet, BADGE, CRB and T-CRB.

Every strategy maps per-frame inference records for the unlabeled pool to an
ordered batch of distinct frame ids. Greedy steps break ties toward the
smaller frame id, so results depend only on the inputs and the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

STRATEGIES = ("random", "entropy", "confidence", "montecarlo", "coreset", "badge", "crb", "tcrb")
SCALAR_STRATEGIES = ("entropy", "confidence", "montecarlo")
AGGREGATES = ("mean", "sum", "max")


@dataclass
class FrameScoreRecord:
    frame_id: int
    sequence_id: int
    index_in_sequence: int
    detections: list
    frame_embedding: np.ndarray
    frame_grad_embedding: np.ndarray
    pass_probs: list | None = None  # per detection: (passes, C+1)


def make_record(frame_id: int, sequence_id: int, index_in_sequence: int, detections: list,
                feature_dim: int, grad_dim: int, pass_probs: list | None = None) -> FrameScoreRecord:
    if detections:
        emb = np.mean([d.feature for d in detections], axis=0)
        gemb = np.mean([d.grad_embedding for d in detections], axis=0)
    else:
        emb, gemb = np.zeros(feature_dim), np.zeros(grad_dim)
    return FrameScoreRecord(frame_id, sequence_id, index_in_sequence, list(detections),
                            np.asarray(emb, dtype=np.float64), np.asarray(gemb, dtype=np.float64),
                            pass_probs)


@dataclass
class SelectionResult:
    strategy: str
    round: int
    selected: list[int]
    scores: dict[int, float] = field(default_factory=dict)
    stages: dict[str, list[int]] = field(default_factory=dict)


@dataclass(frozen=True)
class AcquisitionOptions:
    aggregate: str = "mean"
    entropy_foreground_only: bool = False
    k1_factor: int = 4
    k2_factor: int = 2
    bins: int = 10
    window: int = 10
    density_n0: float = 1000.0
    d0: float = 10.0
    range_max: float | None = None

    def __post_init__(self):
        if self.aggregate not in AGGREGATES:
            raise ValueError(f"aggregate must be one of {AGGREGATES}")
        if not self.k1_factor >= self.k2_factor >= 1:
            raise ValueError("need k1_factor >= k2_factor >= 1")
        if self.bins < 1 or self.window < 1:
            raise ValueError("bins and window must be >= 1")


# -- scalar scores -----------------------------------------------------------

def entropy(probs, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=axis)


def _aggregate(values, how: str) -> float:
    if len(values) == 0:
        return 0.0
    if how == "mean":
        return float(np.mean(values))
    if how == "sum":
        return float(np.sum(values))
    if how == "max":
        return float(np.max(values))
    raise ValueError(f"unknown aggregate {how!r}")


def entropy_score(record: FrameScoreRecord, foreground_only: bool = False, aggregate: str = "mean") -> float:
    values = []
    for d in record.detections:
        p = np.asarray(d.probs, dtype=np.float64)
        if foreground_only:
            fg = p[:-1]
            total = fg.sum()
            p = fg / total if total > 0 else fg
        values.append(float(entropy(p)))
    return _aggregate(values, aggregate)


def confidence_score(record: FrameScoreRecord, aggregate: str = "mean") -> float:
    return _aggregate([1.0 - d.objectness for d in record.detections], aggregate)


def mc_variance_score(record: FrameScoreRecord, aggregate: str = "mean") -> float:
    if record.pass_probs is None:
        raise ValueError(f"frame {record.frame_id}: Monte-Carlo scoring needs per-pass probabilities")
    values = []
    for passes in record.pass_probs:
        passes = np.asarray(passes, dtype=np.float64)
        if passes.shape[0] < 2:
            values.append(0.0)
        else:
            values.append(float(passes.var(axis=0, ddof=1).sum()))
    return _aggregate(values, aggregate)


def top_k(scores: dict[int, float], b: int) -> list[int]:
    return sorted(scores, key=lambda fid: (-scores[fid], fid))[:b]


# -- diversity ---------------------------------------------------------------

def k_center_greedy(points: np.ndarray, ids: Sequence[int], b: int,
                    anchors: np.ndarray | None = None) -> tuple[list[int], list[float]]:
    """Farthest-first traversal; returns positions into ``points`` and the pick radii.

    Without anchors the first pick is the point farthest from the centroid.
    Ties go to the smaller id.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    b = min(b, n)
    if b <= 0:
        return [], []
    order = np.argsort(np.asarray(ids), kind="stable")
    pts = points[order]
    mind = None
    if anchors is not None and len(anchors):
        anchors = np.asarray(anchors, dtype=np.float64).reshape(len(anchors), -1)
        d2 = ((pts[:, None, :] - anchors[None, :, :]) ** 2).sum(-1)
        mind = np.sqrt(d2.min(axis=1))
    picks, radii = [], []
    chosen = np.zeros(n, dtype=bool)
    for _ in range(b):
        score = np.linalg.norm(pts - pts.mean(axis=0), axis=1) if mind is None else mind
        masked = np.where(chosen, -np.inf, score)
        j = int(np.argmax(masked))
        picks.append(int(order[j]))
        radii.append(float(masked[j]))
        chosen[j] = True
        dj = np.linalg.norm(pts - pts[j], axis=1)
        mind = dj if mind is None else np.minimum(mind, dj)
    return picks, radii


def covering_radius(points: np.ndarray, centers: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=-1)
    return float(d.min(axis=1).max())


def coreset_select(records: Sequence[FrameScoreRecord], labeled_embeddings, b: int,
                   round_index: int = 0) -> SelectionResult:
    if b < 1:
        raise ValueError("budget must be >= 1")
    ids = [r.frame_id for r in records]
    if not records:
        return SelectionResult("coreset", round_index, [])
    emb = np.array([r.frame_embedding for r in records])
    anchors = np.asarray(labeled_embeddings, dtype=np.float64) if labeled_embeddings is not None else None
    if anchors is not None and anchors.size == 0:
        anchors = None
    picks, radii = k_center_greedy(emb, ids, b, anchors)
    sel = [ids[p] for p in picks]
    return SelectionResult("coreset", round_index, sel, dict(zip(sel, radii)))


def badge_select(records: Sequence[FrameScoreRecord], b: int, seed=0,
                 round_index: int = 0) -> SelectionResult:
    """k-means++ seeding on gradient embeddings.

    The first center is drawn with probability proportional to the squared
    norm, later ones proportional to the squared distance to the nearest
    chosen center. When all remaining mass is zero the draw is uniform over
    the unchosen frames.
    """
    if b < 1:
        raise ValueError("budget must be >= 1")
    recs = sorted(records, key=lambda r: r.frame_id)
    n = len(recs)
    if n == 0:
        return SelectionResult("badge", round_index, [])
    g = np.array([r.frame_grad_embedding for r in recs])
    rng = np.random.default_rng(seed)
    d2 = (g**2).sum(axis=1)
    chosen = np.zeros(n, dtype=bool)
    sel, scores = [], {}
    for _ in range(min(b, n)):
        mass = np.where(chosen, 0.0, d2)
        total = mass.sum()
        if total > 0:
            j = int(rng.choice(n, p=mass / total))
        else:
            j = int(rng.choice(np.flatnonzero(~chosen)))
        chosen[j] = True
        sel.append(recs[j].frame_id)
        scores[recs[j].frame_id] = float(d2[j])
        d2 = np.minimum(d2, ((g - g[j]) ** 2).sum(axis=1))
    return SelectionResult("badge", round_index, sel, scores)


def random_select(pool_ids: Sequence[int], b: int, seed=0, round_index: int = 0) -> SelectionResult:
    if b < 1:
        raise ValueError("budget must be >= 1")
    ids = sorted(pool_ids)
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(ids), size=min(b, len(ids)), replace=False) if ids else []
    sel = [ids[i] for i in picked]
    return SelectionResult("random", round_index, sel, {fid: 0.0 for fid in sel})


# -- CRB ---------------------------------------------------------------------

def predicted_histogram(detections, num_classes: int) -> np.ndarray:
    h = np.zeros(num_classes)
    for d in detections:
        c = d.box.class_id
        if 0 <= c < num_classes:
            h[c] += 1
    return h


def conciseness_score(detections, labeled_hist, num_classes: int) -> float:
    """Entropy of the label distribution after joining this frame's predictions."""
    joined = np.asarray(labeled_hist, dtype=np.float64) + predicted_histogram(detections, num_classes)
    total = joined.sum()
    if total <= 0:
        return 0.0
    return float(entropy(joined / total))


def density_signature(detections, bins: int, range_max: float, density_n0: float, d0: float) -> np.ndarray:
    """Sum of normalized densities per equal-width BEV-distance bin.

    A detection contributes ``point_count * max(d, d0)^2 / (n0 * d0^2)``, which
    is 1 when it carries exactly the point count expected at its range.
    """
    sig = np.zeros(bins)
    width = range_max / bins
    for d in detections:
        rho = d.point_count * max(d.distance, d0) ** 2 / (density_n0 * d0**2)
        k = min(int(d.distance / width), bins - 1) if width > 0 else 0
        sig[k] += rho
    return sig


def kl_to_uniform(counts) -> float:
    """KL(p || U) for the add-1 smoothed histogram ``counts``."""
    c = np.asarray(counts, dtype=np.float64) + 1.0
    p = c / c.sum()
    return float(np.sum(p * np.log(p * len(p))))


def balance_greedy(signatures: dict[int, np.ndarray], b: int,
                   prior: np.ndarray | None = None,
                   allowed=None) -> tuple[list[int], dict[int, float]]:
    """Pick ``b`` units, each minimizing KL of the pooled signature to uniform.

    ``allowed(unit_id, picked)`` can veto candidates (used for window overlap).
    """
    keys = sorted(signatures)
    if not keys:
        return [], {}
    pooled = np.zeros_like(signatures[keys[0]]) if prior is None else np.array(prior, dtype=np.float64)
    picked, scores = [], {}
    remaining = list(keys)
    while len(picked) < b and remaining:
        best, best_kl = None, math.inf
        for k in remaining:
            if allowed is not None and not allowed(k, picked):
                continue
            kl = kl_to_uniform(pooled + signatures[k])
            if kl < best_kl:
                best, best_kl = k, kl
        if best is None:
            break
        picked.append(best)
        scores[best] = best_kl
        pooled = pooled + signatures[best]
        remaining.remove(best)
    return picked, scores


def _detection_range(records) -> float:
    dmax = max((d.distance for r in records for d in r.detections), default=0.0)
    return dmax * (1 + 1e-9) if dmax > 0 else 1.0


def crb_select(records: Sequence[FrameScoreRecord], labeled_hist, b: int, k1_factor: int = 4,
               k2_factor: int = 2, bins: int = 10, density_n0: float = 1000.0, d0: float = 10.0,
               range_max: float | None = None, round_index: int = 0,
               strategy: str = "crb") -> SelectionResult:
    """Conciseness, then representativeness, then geometric balance.

    Stage C keeps the ``k1_factor*b`` frames whose predicted labels, joined
    with ``labeled_hist``, have the highest class entropy. Stage R runs
    farthest-first selection on gradient embeddings down to ``k2_factor*b``.
    Stage B greedily adds the frame that keeps the pooled range/density
    signature closest to uniform.
    """
    if b < 1:
        raise ValueError("budget must be >= 1")
    if not k1_factor >= k2_factor >= 1:
        raise ValueError("need k1_factor >= k2_factor >= 1")
    labeled_hist = np.asarray(labeled_hist, dtype=np.float64)
    C = len(labeled_hist)
    by_id = {r.frame_id: r for r in records}
    pool = sorted(by_id)
    if not pool:
        return SelectionResult(strategy, round_index, [], stages={"C": [], "R": [], "B": []})
    b_eff = min(b, len(pool))
    k1 = min(k1_factor * b, len(pool))
    k2 = min(k2_factor * b, k1)

    c_scores = {fid: conciseness_score(by_id[fid].detections, labeled_hist, C) for fid in pool}
    stage_c = top_k(c_scores, k1)

    grads = np.array([by_id[fid].frame_grad_embedding for fid in stage_c])
    picks, _ = k_center_greedy(grads, stage_c, k2)
    stage_r = [stage_c[p] for p in picks]

    rmax = range_max if range_max is not None else _detection_range(records)
    sigs = {fid: density_signature(by_id[fid].detections, bins, rmax, density_n0, d0) for fid in stage_r}
    stage_b, kl = balance_greedy(sigs, b_eff)
    return SelectionResult(strategy, round_index, stage_b, kl,
                           stages={"C": stage_c, "R": stage_r, "B": stage_b})


def window_units(records: Sequence[FrameScoreRecord], window: int) -> list[list[FrameScoreRecord]]:
    """All stride-1 runs of ``window`` index-contiguous frames within one sequence."""
    seqs: dict[int, list[FrameScoreRecord]] = {}
    for r in records:
        seqs.setdefault(r.sequence_id, []).append(r)
    units = []
    for sid in sorted(seqs):
        run = sorted(seqs[sid], key=lambda r: r.index_in_sequence)
        for i in range(len(run) - window + 1):
            chunk = run[i:i + window]
            if chunk[-1].index_in_sequence - chunk[0].index_in_sequence == window - 1:
                units.append(chunk)
    return units


def pool_window(chunk: list[FrameScoreRecord]) -> FrameScoreRecord:
    dets = [d for r in chunk for d in r.detections]
    return FrameScoreRecord(
        frame_id=chunk[0].frame_id,
        sequence_id=chunk[0].sequence_id,
        index_in_sequence=chunk[0].index_in_sequence,
        detections=dets,
        frame_embedding=np.mean([r.frame_embedding for r in chunk], axis=0),
        frame_grad_embedding=np.mean([r.frame_grad_embedding for r in chunk], axis=0),
    )


def tcrb_select(records: Sequence[FrameScoreRecord], labeled_hist, b: int, window: int = 10,
                k1_factor: int = 4, k2_factor: int = 2, bins: int = 10, density_n0: float = 1000.0,
                d0: float = 10.0, range_max: float | None = None,
                round_index: int = 0) -> SelectionResult:
    """CRB over contiguous windows of frames, then per-frame CRB for the remainder.

    Windows are scored as pooled records through the same three stages.
    Stage B only accepts windows that do not overlap an accepted one, and
    falls back to the remaining windows in stage-C order when the stage-R
    survivors cannot supply enough disjoint windows. Full windows come out
    ordered by (sequence_id, index); with ``window == 1`` the pick order of
    per-frame CRB is kept.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if b < window:
        raise ValueError(f"budget {b} is smaller than the window {window}")
    labeled_hist = np.asarray(labeled_hist, dtype=np.float64)
    C = len(labeled_hist)
    units = window_units(records, window)
    if not units:
        raise ValueError(f"no sequence has {window} contiguous unlabeled frames")
    rmax = range_max if range_max is not None else _detection_range(records)
    n_windows = b // window
    pooled = {u[0].frame_id: pool_window(u) for u in units}
    members = {u[0].frame_id: [r.frame_id for r in u] for u in units}
    keys = sorted(pooled)
    k1 = min(k1_factor * n_windows, len(keys))
    k2 = min(k2_factor * n_windows, k1)

    c_scores = {k: conciseness_score(pooled[k].detections, labeled_hist, C) for k in keys}
    stage_c = top_k(c_scores, k1)
    grads = np.array([pooled[k].frame_grad_embedding for k in stage_c])
    picks, _ = k_center_greedy(grads, stage_c, k2)
    stage_r = [stage_c[p] for p in picks]

    taken: set[int] = set()

    def disjoint(k, _picked):
        return taken.isdisjoint(members[k])

    chosen: list[int] = []
    kl_scores: dict[int, float] = {}
    prior = np.zeros(bins)
    for candidates in (stage_r, top_k(c_scores, len(keys))):
        sigs = {k: density_signature(pooled[k].detections, bins, rmax, density_n0, d0)
                for k in candidates if k not in chosen}
        while len(chosen) < n_windows:
            got, kl = balance_greedy(sigs, 1, prior=prior, allowed=disjoint)
            if not got:
                break
            k = got[0]
            chosen.append(k)
            kl_scores[k] = kl[k]
            taken.update(members[k])
            prior = prior + sigs.pop(k)
        if len(chosen) == n_windows:
            break

    selected = [fid for k in chosen for fid in members[k]]
    scores = {fid: c_scores[k] for k in chosen for fid in members[k]}
    leftover_b = b - len(selected)
    if leftover_b > 0:
        rest = [r for r in records if r.frame_id not in taken]
        if rest:
            hist = labeled_hist + sum(
                (predicted_histogram(pooled[k].detections, C) for k in chosen), np.zeros(C))
            fill = crb_select(rest, hist, leftover_b, k1_factor, k2_factor, bins, density_n0, d0,
                              rmax, round_index)
            selected.extend(fill.selected)
            scores.update(fill.scores)
    if window > 1:
        pos = {r.frame_id: (r.sequence_id, r.index_in_sequence) for r in records}
        selected.sort(key=lambda fid: pos[fid])
    return SelectionResult("tcrb", round_index, selected, scores,
                           stages={"C": stage_c, "R": stage_r, "B": chosen})


# -- dispatch ----------------------------------------------------------------

def select(strategy: str, records: Sequence[FrameScoreRecord], b: int, seed=0, *,
           labeled_embeddings=None, labeled_hist=None, round_index: int = 0,
           options: AcquisitionOptions = AcquisitionOptions()) -> SelectionResult:
    """Pick up to ``b`` frames from ``records`` (one per unlabeled frame)."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")
    if b < 1:
        raise ValueError("budget must be >= 1")
    ids = [r.frame_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate frame ids in records")
    if strategy == "random":
        return random_select(ids, b, seed, round_index)
    if strategy in SCALAR_STRATEGIES:
        if strategy == "entropy":
            scores = {r.frame_id: entropy_score(r, options.entropy_foreground_only, options.aggregate)
                      for r in records}
        elif strategy == "confidence":
            scores = {r.frame_id: confidence_score(r, options.aggregate) for r in records}
        else:
            scores = {r.frame_id: mc_variance_score(r, options.aggregate) for r in records}
        sel = top_k(scores, b)
        return SelectionResult(strategy, round_index, sel, {fid: scores[fid] for fid in sel})
    if strategy == "coreset":
        return coreset_select(records, labeled_embeddings, b, round_index)
    if strategy == "badge":
        return badge_select(records, b, seed, round_index)

    if labeled_hist is None:
        C = _infer_num_classes(records)
        labeled_hist = np.zeros(C)
    crb_kw = dict(k1_factor=options.k1_factor, k2_factor=options.k2_factor, bins=options.bins,
                  density_n0=options.density_n0, d0=options.d0, range_max=options.range_max,
                  round_index=round_index)
    if strategy == "crb":
        return crb_select(records, labeled_hist, b, **crb_kw)
    window = options.window
    if b < window:
        raise ValueError(f"tcrb budget {b} is smaller than the window {window}")
    return tcrb_select(records, labeled_hist, b, window=window, **crb_kw)


def _infer_num_classes(records) -> int:
    for r in records:
        for d in r.detections:
            return len(d.probs) - 1
    raise ValueError("cannot infer the class count from records without detections")
