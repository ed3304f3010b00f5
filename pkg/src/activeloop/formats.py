"""On-disk formats: dataset directories, checkpoints, CSVs and inference records.

Dataset directory::

    meta.json              format tag, version, payload kind, scene config, class table
    frames/000042.jsonl    line 1: frame header (ids, boxes, tracks); then one point per line
    frames/000042.bin      packed alternative, see ``encode_frame_binary``

Inference records are JSON lines, one frame per line::

    {"frame_id": 7, "sequence_id": 0, "index_in_sequence": 7,
     "detections": [{"box": [x, y, z, l, w, h, yaw, cls], "probs": [...],
                     "objectness": 0.9, "embedding": [...], "grad_embedding": [...],
                     "point_count": 120, "distance": 12.5, "pass_probs": [[...], ...]}]}
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .acquisition import FrameScoreRecord, SelectionResult, make_record
from .geometry import Box3D
from .surrogate import Detection
from .synthetic import Frame

DATASET_FORMAT = "activeloop-dataset"
DATASET_VERSION = 1
CHECKPOINT_FORMAT = "activeloop-checkpoint"
CHECKPOINT_VERSION = 1
BINARY_MAGIC = b"AAL3"
BINARY_VERSION = 1
METRICS_VERSION = 1
MANIFEST_COLUMNS = ("round", "rank", "frame_id", "score")
PROB_TOLERANCE = 1e-6


class DataError(Exception):
    """Malformed input data; ``line`` is 1-based when known."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


def _dump_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


# -- frames ------------------------------------------------------------------

def box_to_list(box: Box3D) -> list:
    return [*box.center, *box.dims, box.yaw, box.class_id]


def box_from_list(values) -> Box3D:
    if len(values) != 8:
        raise ValueError(f"box needs 8 values (7 geometry + class), got {len(values)}")
    return Box3D.from_array(values[:7], int(values[7]))


def frame_header(frame: Frame) -> dict:
    return {
        "frame_id": frame.frame_id,
        "sequence_id": frame.sequence_id,
        "index_in_sequence": frame.index_in_sequence,
        "num_points": len(frame.cloud),
        "boxes": [box_to_list(b) for b in frame.gt_boxes],
        "track_ids": list(frame.track_ids),
        "velocities": frame.velocities.tolist(),
    }


def encode_frame_jsonl(frame: Frame) -> str:
    lines = [_dump_line(frame_header(frame))]
    for p, owner in zip(frame.cloud.tolist(), frame.point_owner.tolist()):
        lines.append(_dump_line(p + [owner]))
    return "\n".join(lines) + "\n"


def decode_frame_jsonl(text: str, path=None) -> Frame:
    lines = text.splitlines()
    if not lines:
        raise DataError("empty frame file", path)
    try:
        head = json.loads(lines[0])
        rows = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON: {exc}", path) from exc
    if len(rows) != head["num_points"]:
        raise DataError(f"expected {head['num_points']} points, found {len(rows)}", path)
    arr = np.array(rows, dtype=np.float64).reshape(-1, 5)
    return Frame(
        frame_id=int(head["frame_id"]),
        sequence_id=int(head["sequence_id"]),
        index_in_sequence=int(head["index_in_sequence"]),
        cloud=arr[:, :4],
        gt_boxes=[box_from_list(b) for b in head["boxes"]],
        point_owner=arr[:, 4].astype(np.int64),
        track_ids=[int(t) for t in head["track_ids"]],
        velocities=np.array(head["velocities"], dtype=np.float64).reshape(-1, 2),
    )


def encode_frame_binary(frame: Frame) -> bytes:
    """``AAL3``, u16 version, u32 array count, then per array: u32 length + float32 data.

    Arrays in order: header (frame_id, sequence_id, index), points (N*4),
    boxes (K*8), point owners (N), track ids (K), velocities (K*2). All
    little-endian.
    """
    arrays = [
        [frame.frame_id, frame.sequence_id, frame.index_in_sequence],
        frame.cloud.ravel(),
        np.array([box_to_list(b) for b in frame.gt_boxes]).ravel(),
        frame.point_owner,
        np.array(frame.track_ids),
        frame.velocities.ravel(),
    ]
    out = [BINARY_MAGIC, struct.pack("<HI", BINARY_VERSION, len(arrays))]
    for a in arrays:
        a = np.asarray(a, dtype="<f4")
        out.append(struct.pack("<I", a.size))
        out.append(a.tobytes())
    return b"".join(out)


def decode_frame_binary(data: bytes, path=None) -> Frame:
    if data[:4] != BINARY_MAGIC:
        raise DataError("bad magic bytes, not an AAL3 frame", path)
    version, count = struct.unpack_from("<HI", data, 4)
    if version != BINARY_VERSION:
        raise DataError(f"unsupported binary frame version {version}", path)
    offset = 10
    arrays = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, offset)
        offset += 4
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float64))
        offset += 4 * n
    if count != 6:
        raise DataError(f"expected 6 arrays, found {count}", path)
    head, points, boxes, owners, tracks, vel = arrays
    return Frame(
        frame_id=int(head[0]),
        sequence_id=int(head[1]),
        index_in_sequence=int(head[2]),
        cloud=points.reshape(-1, 4),
        gt_boxes=[box_from_list(b) for b in boxes.reshape(-1, 8)],
        point_owner=owners.astype(np.int64),
        track_ids=[int(t) for t in tracks],
        velocities=vel.reshape(-1, 2),
    )


def write_dataset(frames: Sequence[Frame], out_dir, scene: dict | None = None,
                  class_names: Sequence[str] | None = None, payload: str = "jsonl") -> Path:
    if payload not in ("jsonl", "binary"):
        raise ValueError(f"payload must be 'jsonl' or 'binary', got {payload!r}")
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    ext = "jsonl" if payload == "jsonl" else "bin"
    files = []
    for f in sorted(frames, key=lambda f: f.frame_id):
        name = f"frames/{f.frame_id:06d}.{ext}"
        if payload == "jsonl":
            (out / name).write_text(encode_frame_jsonl(f))
        else:
            (out / name).write_bytes(encode_frame_binary(f))
        files.append(name)
    meta = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "payload": payload,
        "scene_config": scene,
        "classes": list(class_names) if class_names is not None else None,
        "num_frames": len(files),
        "frames": files,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def read_dataset(path) -> tuple[list[Frame], dict]:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataError("missing meta.json", root)
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != DATASET_FORMAT:
        raise DataError(f"not an {DATASET_FORMAT} directory", meta_path)
    if meta.get("version") != DATASET_VERSION:
        raise DataError(f"unsupported dataset version {meta.get('version')}", meta_path)
    frames = []
    for name in meta["frames"]:
        p = root / name
        if meta["payload"] == "jsonl":
            frames.append(decode_frame_jsonl(p.read_text(), p))
        else:
            frames.append(decode_frame_binary(p.read_bytes(), p))
    return frames, meta


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, payload: dict):
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **payload}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True))
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DataError("not a supported checkpoint", path)
    return doc


# -- CSVs --------------------------------------------------------------------

def metrics_columns(num_classes: int) -> list[str]:
    return (["strategy", "round", "labeled_count", "labeled_fraction", "mAP"]
            + [f"ap_class_{c}" for c in range(num_classes)]
            + ["train_steps", "candidate_visits"])


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_metrics_csv(path, rows: Sequence[dict], num_classes: int):
    cols = metrics_columns(num_classes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in sorted(rows, key=lambda r: r["round"]):
            w.writerow([_fmt(r[c]) for c in cols])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for r in reader:
            row = {}
            for k, v in r.items():
                if k == "strategy":
                    row[k] = v
                elif k in ("round", "labeled_count", "train_steps", "candidate_visits"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    if not rows:
        raise DataError("metrics file has no rows", path)
    return rows


def manifest_rows(result: SelectionResult) -> list[tuple]:
    return [(result.round, rank, fid, result.scores.get(fid, ""))
            for rank, fid in enumerate(result.selected)]


def write_manifest(path, rows: Iterable[tuple]):
    # round-major, then frame id; ``rank`` keeps the pick order
    rows = sorted(rows, key=lambda r: (r[0], r[2]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "frame_id" not in reader.fieldnames:
            raise DataError("manifest lacks a frame_id column", path)
        out = []
        for i, r in enumerate(reader, start=2):
            try:
                out.append({
                    "round": int(r["round"]) if r.get("round") not in (None, "") else 0,
                    "rank": int(r["rank"]) if r.get("rank") not in (None, "") else i - 2,
                    "frame_id": int(r["frame_id"]),
                    "score": float(r["score"]) if r.get("score") not in (None, "") else None,
                })
            except ValueError as exc:
                raise DataError(str(exc), path, i) from exc
    return out


# -- inference records -------------------------------------------------------

def detection_to_dict(d: Detection, pass_probs=None) -> dict:
    out = {
        "box": box_to_list(d.box),
        "probs": np.asarray(d.probs).tolist(),
        "objectness": float(d.objectness),
        "embedding": np.asarray(d.feature).tolist(),
        "grad_embedding": np.asarray(d.grad_embedding).tolist(),
        "point_count": int(d.point_count),
        "distance": float(d.distance),
    }
    if pass_probs is not None:
        out["pass_probs"] = np.asarray(pass_probs).tolist()
    return out


def record_to_dict(rec: FrameScoreRecord) -> dict:
    dets = []
    for i, d in enumerate(rec.detections):
        pp = rec.pass_probs[i] if rec.pass_probs is not None else None
        dets.append(detection_to_dict(d, pp))
    return {
        "frame_id": rec.frame_id,
        "sequence_id": rec.sequence_id,
        "index_in_sequence": rec.index_in_sequence,
        "detections": dets,
    }


def write_records(path, records: Iterable[FrameScoreRecord]):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(_dump_line(record_to_dict(rec)) + "\n")


def _vector(obj, key, lineno, path) -> np.ndarray:
    if key not in obj:
        raise DataError(f"detection missing '{key}'", path, lineno)
    try:
        arr = np.asarray(obj[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"'{key}' is not numeric", path, lineno) from exc
    if not np.all(np.isfinite(arr)):
        raise DataError(f"'{key}' has non-finite values", path, lineno)
    return arr


def read_records(path) -> list[FrameScoreRecord]:
    """Parse and validate an inference-record JSONL file.

    Vector lengths (probs, embedding, grad_embedding) must agree across the
    whole file, probabilities must be non-negative and sum to 1 within
    ``PROB_TOLERANCE``. Violations raise :class:`DataError` with the line.
    """
    dims: dict[str, int] = {}
    records = []
    seen = set()
    has_passes = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc.msg}", path, lineno) from exc
            if not isinstance(obj, dict):
                raise DataError("record must be a JSON object", path, lineno)
            try:
                fid = int(obj["frame_id"])
                sid = int(obj.get("sequence_id", 0))
                idx = int(obj.get("index_in_sequence", 0))
                raw_dets = obj["detections"]
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"record missing or invalid field: {exc}", path, lineno) from exc
            if fid in seen:
                raise DataError(f"duplicate frame_id {fid}", path, lineno)
            seen.add(fid)
            dets, passes = [], []
            for j, rd in enumerate(raw_dets):
                probs = _vector(rd, "probs", lineno, path)
                emb = _vector(rd, "embedding", lineno, path)
                gemb = _vector(rd, "grad_embedding", lineno, path)
                for key, arr in (("probs", probs), ("embedding", emb), ("grad_embedding", gemb)):
                    if arr.ndim != 1:
                        raise DataError(f"detection {j}: '{key}' must be a flat list", path, lineno)
                    if dims.setdefault(key, len(arr)) != len(arr):
                        raise DataError(f"detection {j}: '{key}' has length {len(arr)}, "
                                        f"expected {dims[key]} as earlier in the file", path, lineno)
                if len(probs) < 3:
                    raise DataError(f"detection {j}: probs need C+1 >= 3 entries", path, lineno)
                if np.any(probs < 0) or abs(probs.sum() - 1.0) > PROB_TOLERANCE:
                    raise DataError(f"detection {j}: probs sum to {probs.sum():.6g}, not 1", path, lineno)
                objectness = float(rd.get("objectness", 1.0 - probs[-1]))
                if not 0.0 <= objectness <= 1.0:
                    raise DataError(f"detection {j}: objectness {objectness} outside [0, 1]", path, lineno)
                try:
                    box = box_from_list(rd["box"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"detection {j}: bad box: {exc}", path, lineno) from exc
                if not 0 <= box.class_id < len(probs) - 1:
                    raise DataError(f"detection {j}: class {box.class_id} outside [0, {len(probs) - 1})",
                                    path, lineno)
                pp = rd.get("pass_probs")
                if has_passes is None:
                    has_passes = pp is not None
                elif has_passes != (pp is not None):
                    raise DataError(f"detection {j}: pass_probs present on some detections only",
                                    path, lineno)
                if pp is not None:
                    pp = _vector(rd, "pass_probs", lineno, path)
                    if pp.ndim != 2 or pp.shape[1] != len(probs):
                        raise DataError(f"detection {j}: pass_probs must be passes x {len(probs)}",
                                        path, lineno)
                    passes.append(pp)
                fg = probs[:-1]
                score = objectness * float(fg.max())
                dets.append(Detection(
                    box=box, probs=probs, objectness=objectness, grad_embedding=gemb,
                    point_count=int(rd.get("point_count", 0)),
                    distance=float(rd.get("distance", math.hypot(box.center[0], box.center[1]))),
                    feature=emb, score=score,
                ))
            records.append(make_record(fid, sid, idx, dets, dims.get("embedding", 0),
                                       dims.get("grad_embedding", 0),
                                       passes if has_passes else None))
    # frames without detections need zero vectors of the file-wide size
    for r in records:
        if not r.detections:
            r.frame_embedding = np.zeros(dims.get("embedding", 0))
            r.frame_grad_embedding = np.zeros(dims.get("grad_embedding", 0))
            if has_passes:
                r.pass_probs = []
    return records
