#!/usr/bin/env python3

"""End-to-end runs of the track, bench, verify and synth commands"""

import csv
import json
import sys
from pathlib import Path

import pytest

# Add current directory to path
sys.path.append(str(Path(__file__).parent))

from backbone_nn import build_backbone_spec, init_model
from cli_bench import _bench_table, build_parser, head_copy, run_benchmark
from eval_io import SynthSpec
from main import main
from run_config import config_from_dict

SMALL = {
    "init_pos": 40, "init_loc": 40, "init_neg": 160, "init_iterations": 8, "online_iterations": 3,
    "frame_pos": 10, "frame_loc": 10, "frame_neg": 30, "mining_pool": 64, "mining_keep": 24,
    "object_batch": 32, "positives_per_batch": 8, "loc_batch": 10,
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["verify", "--check", "flop_ratio", "--check", "candidate_count"])
    assert args.check == ["flop_ratio", "candidate_count"]
    assert args.fault is None


def test_synth_writes_otb_layout(tmp_path):
    out = tmp_path / "seq"
    assert main(["synth", "--frames", "3", "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "img").iterdir()) == ["0001.pgm", "0002.pgm", "0003.pgm"]
    assert len((out / "groundtruth_rect.txt").read_text().splitlines()) == 3
    assert json.loads((out / "synth_spec.json").read_text())["frames"] == 3


def test_track_on_saved_sequence(tmp_path, small_config):
    seq = tmp_path / "seq"
    assert main(["synth", "--frames", "4", "--out", str(seq)]) == 0
    out = tmp_path / "run"
    assert main(["track", "--seq", str(seq), "--config", str(small_config), "--seed", "1",
                 "--out", str(out)]) == 0
    with (out / "boxes.csv").open() as f:
        rows = list(csv.DictReader(f))
    assert [int(r["frame"]) for r in rows] == [0, 1, 2, 3]
    metrics = json.loads((out / "metrics.json").read_text())
    assert len(metrics["success_curve"]) == 21
    timings = json.loads((out / "timings.json").read_text())
    assert timings["backbone_forwards_max"] <= 3
    assert json.loads((out / "run.json").read_text())["config"]["seed"] == 1


def test_track_from_synth_spec(tmp_path, small_config):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"frames": 3, "width": 200, "height": 160, "init_box": [76, 56, 48, 48],
                                "velocity": [1, 0]}))
    out = tmp_path / "run"
    assert main(["track", "--synth", str(spec), "--config", str(small_config), "--out", str(out)]) == 0
    assert (out / "curves.csv").exists()


def test_track_reports_bad_input(tmp_path):
    assert main(["track", "--seq", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run")]) == 2
    assert main(["track", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "run")]) == 2


def test_verify_passes_and_catches_injected_fault(tmp_path):
    checks = ["integer_shift_equivalence", "candidate_count", "update_schedule", "flop_ratio"]
    argv = ["verify", "--instances", "2"]
    for name in checks:
        argv += ["--check", name]

    clean = tmp_path / "clean"
    assert main(argv + ["--out", str(clean)]) == 0
    report = json.loads((clean / "verify.json").read_text())
    assert report["passed"] is True
    assert [c["name"] for c in report["checks"]] == checks

    faulty = tmp_path / "faulty"
    assert main(argv + ["--fault", "bilinear", "--out", str(faulty)]) == 1
    report = json.loads((faulty / "verify.json").read_text())
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    assert failed == ["integer_shift_equivalence"]


def test_verify_rejects_unknown_check(tmp_path):
    assert main(["verify", "--check", "nope", "--out", str(tmp_path / "v")]) == 2


def test_bench_needs_three_repetitions(tmp_path, small_config):
    assert main(["bench", "--reps", "2", "--config", str(small_config), "--out", str(tmp_path / "b")]) == 2


def test_benchmark_phases():
    config = config_from_dict({**SMALL, "reps": 3})
    synth = SynthSpec(width=200, height=160, frames=3, init_box=(76.0, 56.0, 48.0, 48.0), velocity=(1.0, 0.0))
    result = run_benchmark(config, synth)
    assert set(result["phases"]) == {"candidate", "training", "update", "first_frame", "frame"}
    assert result["candidates"] == 169
    assert result["fine_samples"] == 100
    candidate = result["phases"]["candidate"]
    assert candidate["flops"]["ratio"] >= 10
    assert candidate["interpolated"]["median"] > 0
    assert result["phases"]["training"]["flops"]["ratio"] is None
    assert result["phases"]["candidate"]["reference"]["speedup"] == pytest.approx(9.4)
    assert _bench_table(result).row_count == 5


def test_update_timing_trains_private_heads():
    model = init_model(build_backbone_spec("desk"), seed=0)
    before = model.object_head.layers[0].weight.copy()
    scratch = head_copy(model)
    scratch.object_head.layers[0].weight += 1.0
    scratch.loc_head.layers[-1].bias[:] = 0.0
    assert (model.object_head.layers[0].weight == before).all()
    assert scratch.conv is model.conv
    assert scratch.loc_head is not model.loc_head
