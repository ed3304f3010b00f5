import csv
import json
import math

import numpy as np
import pytest
import yaml

from activeloop import formats
from activeloop.cli import main
from activeloop.config import ConfigError, from_dict, load_config, schema_defaults
from activeloop.formats import DataError, read_dataset, read_records, write_dataset
from activeloop.report import format_delta
from activeloop.synthetic import SceneConfig, generate_dataset


def write_yaml(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


SMALL = {"dataset": {"synthetic": {"num_sequences": 6, "frames_per_sequence": 5}},
         "schedule": {"initial_count": 6, "per_round_count": 6, "final_fraction": 0.5}}


@pytest.mark.parametrize("payload", ["jsonl", "binary"])
def test_dataset_round_trip(tmp_path, payload):
    cfg = SceneConfig(num_sequences=2, frames_per_sequence=3, seed=5)
    frames = generate_dataset(cfg)
    write_dataset(frames, tmp_path / "ds", cfg.to_dict(), cfg.class_names, payload)
    back, meta = read_dataset(tmp_path / "ds")
    assert meta["classes"] == cfg.class_names
    for a, b in zip(frames, back):
        assert (a.frame_id, a.sequence_id, a.index_in_sequence) == (b.frame_id, b.sequence_id,
                                                                    b.index_in_sequence)
        tol = 1e-5 if payload == "binary" else 0.0
        assert np.allclose(a.cloud, b.cloud, atol=tol, rtol=tol)
        assert [g.class_id for g in a.gt_boxes] == [g.class_id for g in b.gt_boxes]
        for g, h in zip(a.gt_boxes, b.gt_boxes):
            assert np.allclose(g.to_array(), h.to_array(), atol=max(tol, 1e-12))


def test_binary_magic(tmp_path):
    cfg = SceneConfig(num_sequences=1, frames_per_sequence=1)
    write_dataset(generate_dataset(cfg), tmp_path / "ds", cfg.to_dict(), cfg.class_names, "binary")
    blob = next((tmp_path / "ds" / "frames").iterdir()).read_bytes()
    assert blob[:4] == b"AAL3"
    bad = next((tmp_path / "ds" / "frames").iterdir())
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DataError):
        read_dataset(tmp_path / "ds")


def test_cli_gen(tmp_path):
    conf = write_yaml(tmp_path / "c.yaml", {"dataset": {"synthetic": {"num_sequences": 2,
                                                                        "frames_per_sequence": 3}}})
    assert main(["gen", "--config", conf, "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", "--config", conf, "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a" / "frames").iterdir())
    assert len(files) == 6 and (tmp_path / "a" / "meta.json").exists()
    for name in files:
        assert (tmp_path / "a" / "frames" / name).read_bytes() == (tmp_path / "b" / "frames" / name).read_bytes()


def test_invalid_class_count_is_config_error(tmp_path, capsys):
    conf = write_yaml(tmp_path / "c.yaml", {"dataset": {"synthetic": {"num_classes": 1}}})
    assert main(["gen", "--config", conf, "--out", str(tmp_path / "x")]) == 2
    assert "num_classes" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        from_dict({"dataset": {"synthetic": {"classes": [{"name": "car", "dims": [4, 2, 1.5]}]}}})


def test_config_defaults_and_errors(tmp_path):
    cfg = from_dict({})
    assert cfg.strategies == ["random", "entropy"] and cfg.schedule.initial_count == 20
    assert schema_defaults()["training"]["epochs_update"] == 10
    with pytest.raises(ConfigError):
        from_dict({"strategies": ["margin"]})
    with pytest.raises(ConfigError):
        from_dict({"dataset": {"synthetic": {}, "path": "x"}})
    with pytest.raises(ConfigError):
        from_dict({"split": [0.5, 0.1, 0.1]})
    (tmp_path / "bad.yaml").write_text("a: [")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    assert "schedule.initial_count = 20" in out and "training.kind = \"fine_tune\"" in out


def test_unknown_strategy_exit(tmp_path, capsys):
    conf = write_yaml(tmp_path / "c.yaml", SMALL)
    assert main(["run", "--config", conf, "--strategy", "margin", "--out", str(tmp_path / "r")]) == 2
    assert "margin" in capsys.readouterr().err


def test_run_two_strategies(tmp_path):
    conf = write_yaml(tmp_path / "c.yaml", SMALL)
    out = tmp_path / "r"
    assert main(["run", "--config", conf, "--out", str(out)]) == 0
    for s in ("random", "entropy"):
        rows = formats.read_metrics_csv(out / f"metrics_{s}.csv")
        assert [r["round"] for r in rows] == [0, 1]
        assert list(rows[0]) == formats.metrics_columns(4)
    init = formats.read_manifest(out / "manifest_initial.csv")
    assert len(init) == 6


def test_resume_matches_straight_run(tmp_path):
    conf = write_yaml(tmp_path / "c.yaml", {**SMALL, "strategies": ["crb", "montecarlo"],
                                            "schedule": {"initial_count": 5, "per_round_count": 5,
                                                         "final_fraction": 1.0}})
    straight, split = tmp_path / "s", tmp_path / "p"
    assert main(["run", "--config", conf, "--out", str(straight)]) == 0
    assert main(["run", "--config", conf, "--out", str(split), "--max-rounds", "2"]) == 0
    assert len(formats.read_metrics_csv(split / "metrics_crb.csv")) == 2
    assert main(["run", "--config", conf, "--out", str(split), "--resume"]) == 0
    assert len(formats.read_metrics_csv(split / "metrics_crb.csv")) == 5
    for name in ("metrics_crb.csv", "metrics_montecarlo.csv", "manifest_crb.csv", "manifest_montecarlo.csv"):
        assert (straight / name).read_bytes() == (split / name).read_bytes()


def test_run_rejects_records_source(tmp_path):
    (tmp_path / "r.jsonl").write_text("")
    conf = write_yaml(tmp_path / "c.yaml", {"dataset": {"records": str(tmp_path / "r.jsonl")}})
    assert main(["run", "--config", conf, "--out", str(tmp_path / "o")]) == 2


def det_json(probs, cls=None, point_count=10):
    probs = list(probs)
    if cls is None:
        cls = int(np.argmax(probs[:-1]))
    return {"box": [5, 0, 0.8, 4, 2, 1.5, 0, cls], "probs": probs, "objectness": 1 - probs[-1],
            "embedding": [0.0, 1.0], "grad_embedding": [0.0, 0.0, 0.0], "point_count": point_count,
            "distance": 5.0}


def write_jsonl(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    return str(path)


def hand_records():
    return [
        {"frame_id": 10, "sequence_id": 0, "index_in_sequence": 0,
         "detections": [det_json([0.9, 0.05, 0.05])]},
        {"frame_id": 11, "sequence_id": 0, "index_in_sequence": 1,
         "detections": [det_json([0.4, 0.3, 0.3])]},
        {"frame_id": 12, "sequence_id": 0, "index_in_sequence": 2,
         "detections": [det_json([0.6, 0.2, 0.2]), det_json([1 / 3, 1 / 3, 1 / 3])]},
    ]


def test_cli_select_entropy(tmp_path):
    path = write_jsonl(tmp_path / "r.jsonl", hand_records())

    def h(p):
        return -sum(x * math.log(x) for x in p)

    expected = {10: h([0.9, 0.05, 0.05]), 11: h([0.4, 0.3, 0.3]),
                12: (h([0.6, 0.2, 0.2]) + math.log(3)) / 2}
    # 0.394, 1.0889, (0.9503 + 1.0986) / 2 = 1.0245
    assert sorted(expected, key=expected.get, reverse=True) == [11, 12, 10]
    out = tmp_path / "m.csv"
    assert main(["select", "--records", path, "--strategy", "entropy", "--budget", "2",
                 "--out", str(out)]) == 0
    rows = formats.read_manifest(out)
    assert [r["frame_id"] for r in rows] == [11, 12]
    for r in rows:
        assert r["score"] == pytest.approx(expected[r["frame_id"]], abs=1e-12)
    assert main(["select", "--records", path, "--strategy", "entropy", "--budget", "9",
                 "--out", str(out)]) == 0
    assert sorted(r["frame_id"] for r in formats.read_manifest(out)) == [10, 11, 12]


def test_cli_select_with_labeled_manifest(tmp_path):
    path = write_jsonl(tmp_path / "r.jsonl", hand_records())
    lab = tmp_path / "lab.csv"
    formats.write_manifest(lab, [(0, 0, 11, "")])
    out = tmp_path / "m.csv"
    assert main(["select", "--records", path, "--strategy", "entropy", "--budget", "1",
                 "--labeled", str(lab), "--out", str(out)]) == 0
    assert [r["frame_id"] for r in formats.read_manifest(out)] == [12]


def test_records_validation(tmp_path, capsys):
    recs = hand_records()
    recs[1]["detections"][0]["probs"] = [0.4, 0.2, 0.2]
    path = write_jsonl(tmp_path / "bad.jsonl", recs)
    with pytest.raises(DataError) as exc:
        read_records(path)
    assert exc.value.line == 2 and "sum" in str(exc.value)
    assert main(["select", "--records", path, "--strategy", "entropy", "--budget", "1",
                 "--out", str(tmp_path / "m.csv")]) == 3
    assert "bad.jsonl:2" in capsys.readouterr().err

    recs = hand_records()
    recs[2]["detections"][1]["embedding"] = [1.0, 2.0, 3.0]
    with pytest.raises(DataError) as exc:
        read_records(write_jsonl(tmp_path / "len.jsonl", recs))
    assert exc.value.line == 3
    (tmp_path / "junk.jsonl").write_text('{"frame_id": 1, "detections": []}\nnot json\n')
    with pytest.raises(DataError) as exc:
        read_records(tmp_path / "junk.jsonl")
    assert exc.value.line == 2


def test_records_round_trip(tmp_path):
    recs = read_records(write_jsonl(tmp_path / "r.jsonl", hand_records()))
    formats.write_records(tmp_path / "again.jsonl", recs)
    back = read_records(tmp_path / "again.jsonl")
    assert [r.frame_id for r in back] == [10, 11, 12]
    assert np.array_equal(back[2].detections[1].probs, recs[2].detections[1].probs)


def test_eval_checkpoint(tmp_path):
    conf = write_yaml(tmp_path / "c.yaml", {**SMALL, "strategies": ["random"]})
    out = tmp_path / "r"
    assert main(["run", "--config", conf, "--out", str(out)]) == 0
    ckpt = sorted((out / "checkpoints" / "random").glob("round_*.json"))[-1]
    assert main(["eval", "--config", conf, "--checkpoint", str(ckpt), "--out", str(tmp_path / "e.json")]) == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    last = formats.read_metrics_csv(out / "metrics_random.csv")[-1]
    assert rep["mAP"] == last["mAP"]


def test_report_single_curve_has_no_delta(tmp_path):
    m = tmp_path / "metrics_random.csv"
    formats.write_metrics_csv(m, [{"strategy": "random", "round": 0, "labeled_count": 10,
                                   "labeled_fraction": 0.1, "mAP": 0.5, "ap_class_0": 0.5,
                                   "ap_class_1": 0.5, "train_steps": 1, "candidate_visits": 2}], 2)
    assert main(["report", str(m), "--out", str(tmp_path / "rep")]) == 0
    header = next(csv.reader(open(tmp_path / "rep" / "report.csv")))
    assert header == ["round", "percent", "random"]
    assert (tmp_path / "rep" / "learning_curves.svg").exists()


def test_report_misaligned_rounds_warns(tmp_path, capsys):
    paths = []
    for s, n in (("random", 3), ("entropy", 2)):
        p = tmp_path / f"metrics_{s}.csv"
        formats.write_metrics_csv(p, [{"strategy": s, "round": t, "labeled_count": 10 * (t + 1),
                                       "labeled_fraction": 0.1 * (t + 1), "mAP": 0.5 + 0.1 * t,
                                       "ap_class_0": 0.5, "ap_class_1": 0.5, "train_steps": 1,
                                       "candidate_visits": 1} for t in range(n)], 2)
        paths.append(str(p))
    assert main(["report", *paths, "--out", str(tmp_path / "rep")]) == 0
    captured = capsys.readouterr()
    assert "warning" in captured.err
    assert "| 3 |" not in captured.out


def test_format_delta():
    assert format_delta(54.32 - 51.03) == "+3.29"
    assert format_delta(68.23 - 69.84) == "-1.61"
    assert format_delta(-0.001) == "+0.00"
