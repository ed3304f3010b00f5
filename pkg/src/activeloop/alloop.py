"""Episodic active-learning loop: pools, schedule, oracle, training strategy, metrics."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import acquisition, formats
from .acquisition import AcquisitionOptions, SelectionResult
from .evaluation import MatchConfig, evaluate
from .surrogate import NUM_FEATURES, ModelState, infer, infer_stochastic, propose, train_arrays, training_arrays
from .synthetic import Frame, class_histogram

log = logging.getLogger(__name__)

TRAIN_KINDS = ("from_scratch", "fine_tune", "incremental_replay")


class BudgetExhausted(RuntimeError):
    pass


@dataclass
class PoolState:
    labeled: set[int]
    unlabeled: set[int]
    initial: list[int] = field(default_factory=list)
    query_history: list[list[int]] = field(default_factory=list)
    round: int = 0

    @classmethod
    def start(cls, all_ids: Sequence[int], initial: Sequence[int]) -> "PoolState":
        initial = sorted(int(i) for i in initial)
        state = cls(set(initial), set(all_ids) - set(initial), initial)
        if len(state.labeled) != len(initial) or not state.labeled <= set(all_ids):
            raise ValueError("initial pool must be distinct ids drawn from the dataset")
        state.check()
        return state

    @property
    def size(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    def check(self):
        if self.labeled & self.unlabeled:
            raise AssertionError("labeled and unlabeled pools overlap")
        seen = set(self.initial)
        for rnd in self.query_history:
            if seen & set(rnd):
                raise AssertionError("query rounds overlap")
            seen |= set(rnd)
        if seen != self.labeled:
            raise AssertionError("labeled pool differs from initial pool plus query history")

    def copy(self) -> "PoolState":
        return PoolState(set(self.labeled), set(self.unlabeled), list(self.initial),
                         [list(q) for q in self.query_history], self.round)

    def to_dict(self) -> dict:
        return {"labeled": sorted(self.labeled), "unlabeled": sorted(self.unlabeled),
                "initial": list(self.initial), "query_history": self.query_history,
                "round": self.round}

    @classmethod
    def from_dict(cls, d: dict) -> "PoolState":
        s = cls(set(d["labeled"]), set(d["unlabeled"]), list(d["initial"]),
                [list(q) for q in d["query_history"]], int(d["round"]))
        s.check()
        return s


def oracle_label(state: PoolState, frame_ids: Sequence[int], dataset: dict[int, Frame]) -> list[Frame]:
    """Move ``frame_ids`` from the unlabeled to the labeled pool; GT is the annotation.

    An empty request leaves the pools untouched. A non-empty one is recorded
    as the next query round.
    """
    ids = [int(i) for i in frame_ids]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in labeling request")
    missing = [i for i in ids if i not in state.unlabeled]
    if missing:
        raise ValueError(f"frames {missing} are not in the unlabeled pool")
    if not ids:
        return []
    state.unlabeled.difference_update(ids)
    state.labeled.update(ids)
    state.query_history.append(ids)
    state.check()
    return [dataset[i] for i in ids]


@dataclass(frozen=True)
class Schedule:
    initial_count: int
    per_round_count: int
    final_budget_fraction: float
    sizes: tuple[int, ...]

    def __len__(self):
        return len(self.sizes)


def make_schedule(dataset_size: int, initial_count: int, per_round_count: int,
                  final_fraction: float, sizes: Sequence[int] | None = None) -> Schedule:
    """Cumulative labeled-pool sizes per round.

    Sizes run ``initial, initial + step, ...`` while they stay within
    ``floor(final_fraction * dataset_size)``. An explicit ``sizes`` list
    overrides the arithmetic rule (it must still be increasing and in budget).
    """
    if dataset_size < 1 or initial_count < 1 or per_round_count < 1 or final_fraction <= 0:
        raise ValueError("schedule arguments must be positive")
    budget = int(np.floor(final_fraction * dataset_size + 1e-9))
    if sizes is not None:
        sizes = tuple(int(s) for s in sizes)
        if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
            raise ValueError("explicit sizes must be positive and strictly increasing")
        if sizes[-1] > budget or sizes[-1] > dataset_size:
            raise ValueError(f"explicit sizes exceed the budget of {budget}")
        return Schedule(sizes[0], per_round_count, final_fraction, sizes)
    out = []
    n = initial_count
    while n <= budget:
        out.append(n)
        n += per_round_count
    if not out:
        raise ValueError(f"initial count {initial_count} exceeds the budget of {budget} frames")
    return Schedule(initial_count, per_round_count, final_fraction, tuple(out))


@dataclass(frozen=True)
class TrainStrategy:
    kind: str = "fine_tune"
    epochs_initial: int = 50
    epochs_update: int = 10
    replay_fraction: float = 0.2
    lr: float = 0.1
    batch_size: int = 32
    l2: float = 1e-4

    def __post_init__(self):
        if self.kind not in TRAIN_KINDS:
            raise ValueError(f"train kind must be one of {TRAIN_KINDS}, got {self.kind!r}")
        if self.epochs_initial < 1 or self.epochs_update < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ValueError("replay_fraction must be in [0, 1]")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & (2**63 - 1) for p in parts]).generate_state(1, np.uint64)[0])


def split_by_sequence(frames: Sequence[Frame], seed: int,
                      fractions=(0.8, 0.1, 0.1)) -> tuple[list[Frame], list[Frame], list[Frame]]:
    """Partition whole sequences into train/val/test; sequences are never cut."""
    seqs = sorted({f.sequence_id for f in frames})
    rng = np.random.default_rng(derive_seed(seed, 0x5EC))
    order = [seqs[i] for i in rng.permutation(len(seqs))]
    n = len(order)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    if n - n_train - n_val < 1 and fractions[2] > 0 and n > 1:
        if n_val > 0:
            n_val -= 1
        else:
            n_train -= 1
    part = {s: 0 for s in order[:n_train]}
    part.update({s: 1 for s in order[n_train:n_train + n_val]})
    part.update({s: 2 for s in order[n_train + n_val:]})
    out = ([], [], [])
    for f in sorted(frames, key=lambda f: f.frame_id):
        out[part[f.sequence_id]].append(f)
    return out


@dataclass
class LoopContext:
    """Everything a round needs that does not change between rounds."""

    train_frames: dict[int, Frame]
    test_frames: list[Frame]
    num_classes: int
    acquisition: AcquisitionOptions = AcquisitionOptions()
    match: MatchConfig = MatchConfig()
    mc_passes: int = 10
    mc_drop_rate: float = 0.3
    threads: int = 1
    candidates: dict = field(default_factory=dict)
    train_cache: dict = field(default_factory=dict)

    def candidates_for(self, frame: Frame):
        c = self.candidates.get(frame.frame_id)
        if c is None:
            c = self.candidates[frame.frame_id] = propose(frame)
        return c


@dataclass
class CurveRow:
    strategy: str
    round: int
    labeled_count: int
    labeled_fraction: float
    mAP: float
    ap: list[float]
    train_steps: int
    candidate_visits: int
    selected: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        d = {
            "strategy": self.strategy, "round": self.round, "labeled_count": self.labeled_count,
            "labeled_fraction": self.labeled_fraction, "mAP": self.mAP,
            "train_steps": self.train_steps, "candidate_visits": self.candidate_visits,
            "selected": list(self.selected),
        }
        d.update({f"ap_class_{c}": a for c, a in enumerate(self.ap)})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CurveRow":
        ap = [d[k] for k in sorted((k for k in d if k.startswith("ap_class_")),
                                   key=lambda k: int(k.rsplit("_", 1)[1]))]
        return cls(d["strategy"], d["round"], d["labeled_count"], d["labeled_fraction"], d["mAP"],
                   ap, d["train_steps"], d["candidate_visits"], list(d.get("selected", [])))


def thread_count() -> int:
    raw = os.environ.get("ACTIVELOOP_THREADS")
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_records(ctx: LoopContext, model: ModelState, frame_ids: Sequence[int],
                  with_passes: bool = False) -> list[acquisition.FrameScoreRecord]:
    """Inference records for ``frame_ids`` in id order (fan-out is order-preserving)."""
    grad_dim = (model.num_classes + 1) * (NUM_FEATURES + 1)

    def one(fid):
        f = ctx.train_frames[fid]
        cands = ctx.candidates_for(f)
        if with_passes:
            dets, passes = infer_stochastic(model, f, ctx.mc_passes, ctx.mc_drop_rate, cands)
        else:
            dets, passes = infer(model, f, cands), None
        return acquisition.make_record(fid, f.sequence_id, f.index_in_sequence, dets,
                                       NUM_FEATURES, grad_dim, passes)

    ids = sorted(frame_ids)
    for fid in ids:  # fill the proposal cache before fanning out
        ctx.candidates_for(ctx.train_frames[fid])
    if ctx.threads > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=ctx.threads) as pool:
            return list(pool.map(one, ids))
    return [one(fid) for fid in ids]


def train_for_round(ctx: LoopContext, state: PoolState, model: ModelState | None,
                    ts: TrainStrategy, seed: int) -> ModelState:
    t = state.round
    first = model is None or not model.trained or t == 0
    if ts.kind == "from_scratch" or first:
        fresh = ModelState.fresh(ctx.num_classes, rng_stream_id=seed)
        if model is not None:
            # counters keep accumulating across rounds
            fresh.train_steps, fresh.candidate_visits = model.train_steps, model.candidate_visits
        frames = [ctx.train_frames[i] for i in sorted(state.labeled)]
        x, y = training_arrays(frames, ctx.num_classes, ctx.train_cache)
        return train_arrays(fresh, x, y, ts.epochs_initial, lr=ts.lr, resume=False,
                            batch_size=ts.batch_size, l2=ts.l2)
    if ts.kind == "fine_tune":
        ids = sorted(state.labeled)
    else:
        latest = set(state.query_history[-1]) if state.query_history else set()
        older = sorted(state.labeled - latest)
        k = int(round(ts.replay_fraction * len(older)))
        rng = np.random.default_rng(derive_seed(seed, t, 0xBEEF))
        replay = [older[i] for i in sorted(rng.choice(len(older), size=k, replace=False))] if k else []
        ids = sorted(latest | set(replay))
    frames = [ctx.train_frames[i] for i in ids]
    x, y = training_arrays(frames, ctx.num_classes, ctx.train_cache)
    return train_arrays(model, x, y, ts.epochs_update, lr=ts.lr, resume=True,
                        batch_size=ts.batch_size, l2=ts.l2)


def run_round(ctx: LoopContext, state: PoolState, model: ModelState | None, strategy: str,
              ts: TrainStrategy, schedule: Schedule, seed: int
              ) -> tuple[PoolState, ModelState, CurveRow, SelectionResult | None]:
    """Train, evaluate, and (unless this is the last round) select and label.

    Row ``t`` describes the model trained on ``schedule[t]`` labeled frames;
    the selection made in round ``t`` brings the pool to ``schedule[t + 1]``.
    """
    t = state.round
    if t >= len(schedule):
        raise BudgetExhausted(f"round {t} is past the last scheduled round {len(schedule) - 1}")
    if len(state.labeled) != schedule.sizes[t]:
        raise ValueError(f"round {t}: labeled pool has {len(state.labeled)} frames, "
                         f"schedule expects {schedule.sizes[t]}")
    state = state.copy()
    steps0 = model.train_steps if model is not None else 0
    visits0 = model.candidate_visits if model is not None else 0
    model = train_for_round(ctx, state, model, ts, seed)
    report = evaluate(model, ctx.test_frames, ctx.match, ctx.candidates)

    selection = None
    if t + 1 < len(schedule):
        b = schedule.sizes[t + 1] - len(state.labeled)
        records = build_records(ctx, model, state.unlabeled, with_passes=strategy == "montecarlo")
        kw = {}
        if strategy == "coreset":
            kw["labeled_embeddings"] = [r.frame_embedding
                                        for r in build_records(ctx, model, state.labeled)]
        if strategy in ("crb", "tcrb"):
            labeled_frames = [ctx.train_frames[i] for i in sorted(state.labeled)]
            kw["labeled_hist"] = class_histogram(labeled_frames, ctx.num_classes)
        selection = acquisition.select(strategy, records, b, seed=derive_seed(seed, t, 0x5E1),
                                       round_index=t, options=ctx.acquisition, **kw)
        if len(selection.selected) != min(b, len(state.unlabeled)):
            raise AssertionError(f"{strategy} returned {len(selection.selected)} ids for budget {b}")
        oracle_label(state, selection.selected, ctx.train_frames)

    row = CurveRow(
        strategy=strategy, round=t, labeled_count=schedule.sizes[t],
        labeled_fraction=schedule.sizes[t] / state.size, mAP=report.mAP, ap=report.ap,
        train_steps=model.train_steps - steps0, candidate_visits=model.candidate_visits - visits0,
        selected=list(selection.selected) if selection else [],
    )
    state.round = t + 1
    return state, model, row, selection


def initial_pool(train_ids: Sequence[int], count: int, seed: int) -> list[int]:
    ids = sorted(train_ids)
    if count > len(ids):
        raise ValueError(f"initial count {count} exceeds the {len(ids)} training frames")
    rng = np.random.default_rng(derive_seed(seed, 0x1417))
    return sorted(ids[i] for i in rng.choice(len(ids), size=count, replace=False))


# -- experiment driver -------------------------------------------------------

def run_strategy(ctx: LoopContext, strategy: str, ts: TrainStrategy, schedule: Schedule,
                 initial: Sequence[int], seed: int, out_dir: Path | None = None,
                 resume: bool = False, max_rounds: int | None = None) -> list[CurveRow]:
    """All rounds for one strategy; checkpoints after every round when ``out_dir`` is set."""
    state = PoolState.start(list(ctx.train_frames), initial)
    model, rows, manifest = None, [], []
    ckpt_dir = out_dir / "checkpoints" / strategy if out_dir is not None else None
    if resume and ckpt_dir is not None and ckpt_dir.exists():
        ckpts = sorted(ckpt_dir.glob("round_*.json"))
        if ckpts:
            doc = formats.load_checkpoint(ckpts[-1])
            state = PoolState.from_dict(doc["pool"])
            model = ModelState.from_dict(doc["model"])
            rows = [CurveRow.from_dict(r) for r in doc["rows"]]
            manifest = [tuple(m) for m in doc["manifest"]]
            log.info("%s: resuming at round %d", strategy, state.round)
    done = 0
    while state.round < len(schedule):
        if max_rounds is not None and done >= max_rounds:
            break
        state, model, row, sel = run_round(ctx, state, model, strategy, ts, schedule, seed)
        rows.append(row)
        if sel is not None:
            manifest.extend(formats.manifest_rows(sel))
        done += 1
        log.info("%s round %d: labeled=%d mAP=%.4f", strategy, row.round, row.labeled_count, row.mAP)
        if out_dir is not None:
            formats.save_checkpoint(ckpt_dir / f"round_{row.round:03d}.json", {
                "strategy": strategy,
                "pool": state.to_dict(),
                "model": model.to_dict(),
                "rows": [r.as_dict() for r in rows],
                "manifest": [list(m) for m in manifest],
            })
            formats.write_metrics_csv(out_dir / f"metrics_{strategy}.csv",
                                      [r.as_dict() for r in rows], ctx.num_classes)
            formats.write_manifest(out_dir / f"manifest_{strategy}.csv", manifest)
    return rows


def run_experiment(config, out_dir=None, resume: bool = False,
                   max_rounds: int | None = None) -> dict[str, list[CurveRow]]:
    """Run every configured strategy from one shared initial pool.

    ``config`` is an :class:`activeloop.config.ExperimentConfig`.
    """
    if not config.strategies:
        raise ValueError("no strategies configured")
    frames = config.load_frames()
    train, _val, test = split_by_sequence(frames, config.seed, config.split)
    if not test:
        raise ValueError("test split is empty; add more sequences")
    num_classes = config.num_classes(frames)
    schedule = make_schedule(len(train), config.schedule.initial_count, config.schedule.per_round_count,
                             config.schedule.final_fraction, config.schedule.sizes)
    initial = initial_pool([f.frame_id for f in train], schedule.sizes[0], config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        formats.write_manifest(out / "manifest_initial.csv", [(0, r, fid, "") for r, fid in enumerate(initial)])
    ctx = LoopContext(
        train_frames={f.frame_id: f for f in train}, test_frames=test, num_classes=num_classes,
        acquisition=config.acquisition_options(), match=config.match, mc_passes=config.mc_passes,
        mc_drop_rate=config.mc_drop_rate, threads=thread_count(),
    )
    curves = {}
    for strategy in config.strategies:
        seed = config.strategy_seeds.get(strategy, config.seed)
        curves[strategy] = run_strategy(ctx, strategy, config.train, schedule, initial, seed,
                                        out, resume, max_rounds)
    return curves
