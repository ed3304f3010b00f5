import numpy as np
import pytest

from activeloop.acquisition import FrameScoreRecord
from activeloop.geometry import Box3D
from activeloop.surrogate import NUM_FEATURES, Detection


def make_det(probs, *, center=(5.0, 0.0, 0.8), dims=(4.0, 1.8, 1.6), point_count=50,
             score=None, grad=None, cls=None, yaw=0.0):
    probs = np.asarray(probs, dtype=np.float64)
    C = len(probs) - 1
    cls = int(np.argmax(probs[:C])) if cls is None else cls
    box = Box3D(center, dims, yaw, cls)
    obj = 1.0 - probs[C]
    return Detection(
        box=box, probs=probs, objectness=obj,
        grad_embedding=np.zeros((C + 1) * (NUM_FEATURES + 1)) if grad is None else np.asarray(grad, float),
        point_count=point_count, distance=float(np.hypot(center[0], center[1])),
        feature=np.zeros(NUM_FEATURES), score=obj * probs[cls] if score is None else score,
    )


def make_record(fid, dets=(), *, seq=0, idx=None, emb=None, gemb=None, pass_probs=None):
    dets = list(dets)
    if emb is None:
        emb = np.zeros(NUM_FEATURES)
    if gemb is None:
        gemb = np.mean([d.grad_embedding for d in dets], axis=0) if dets else np.zeros(1)
    return FrameScoreRecord(fid, seq, fid if idx is None else idx, dets,
                            np.asarray(emb, float), np.asarray(gemb, float), pass_probs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
