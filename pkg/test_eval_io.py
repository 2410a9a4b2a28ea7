#!/usr/bin/env python3

"""Sequence ingestion, synthetic sequences, OPE metrics and result files"""

import csv
import json
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

# Add current directory to path
sys.path.append(str(Path(__file__).parent))

import path_utils
from errors import IngestionError, InputError, SynthSpecError
from eval_io import (
    GROUNDTRUTH_FILE,
    SynthSpec,
    load_sequence,
    load_synth_spec,
    ope_evaluate,
    parse_groundtruth,
    read_boxes,
    read_metrics,
    round_half_up,
    save_sequence,
    synth_sequence,
    write_results,
)
from geometry import Box

TINY = SynthSpec(width=64, height=48, frames=4, init_box=(10.0, 10.0, 20.0, 16.0), velocity=(3.0, 1.5))


def test_parse_groundtruth_separators_and_origin(tmp_path):
    gt = tmp_path / GROUNDTRUTH_FILE
    gt.write_text("1,1,10,20\n5\t6\t7\t8\n\n3 4 5 6\n")
    boxes = parse_groundtruth(gt)
    assert [b.as_tuple() for b in boxes] == [(0, 0, 10, 20), (4, 5, 7, 8), (2, 3, 5, 6)]


@pytest.mark.parametrize("line", ["1,2,3", "1,2,x,4", "1,2,0,4"])
def test_parse_groundtruth_reports_bad_line(tmp_path, line):
    gt = tmp_path / GROUNDTRUTH_FILE
    gt.write_text(f"1,1,10,20\n{line}\n")
    with pytest.raises(IngestionError) as excinfo:
        parse_groundtruth(gt)
    assert excinfo.value.line == 2


def test_missing_groundtruth(tmp_path):
    with pytest.raises(IngestionError):
        parse_groundtruth(tmp_path / GROUNDTRUTH_FILE)


def test_round_half_up():
    assert round_half_up(2.5) == 3
    assert round_half_up(-2.5) == -2
    assert round_half_up(2.49) == 2


def test_synth_boxes_follow_motion():
    assert TINY.box_at(0).as_tuple() == (10.0, 10.0, 20.0, 16.0)
    # center (20, 18) + (3, 1.5) * 1 -> x = 23 - 10 = 13, y = 19.5 - 8 = 11.5 -> 12
    assert TINY.box_at(1).as_tuple() == (13.0, 12.0, 20.0, 16.0)
    wave = SynthSpec(motion="sinusoidal", amplitude=(10.0, 0.0), period=4.0)
    assert wave.center_at(1)[0] == pytest.approx(wave.center_at(0)[0] + 10.0)


def test_synth_spec_validation(tmp_path):
    with pytest.raises(SynthSpecError):
        SynthSpec.from_dict({**TINY.to_dict(), "frames": 40})  # leaves the frame
    with pytest.raises(SynthSpecError):
        SynthSpec.from_dict({"colour": "red"})
    with pytest.raises(SynthSpecError):
        SynthSpec.from_dict({**TINY.to_dict(), "init_box": [10, 10, 8, 8]})
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(TINY.to_dict()))
    assert load_synth_spec(path) == TINY
    with pytest.raises(SynthSpecError):
        load_synth_spec(tmp_path / "missing.json")


def test_synth_sequence_is_deterministic_and_drawn():
    a = synth_sequence(TINY)
    b = synth_sequence(TINY)
    assert len(a) == 4
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa, fb)
    box = a.truth[2]
    frame = a.frames[2]
    assert frame.shape == (48, 64)
    assert frame[int(box.y), int(box.x)] == 255
    assert frame[int(box.y + box.h) - 1, int(box.x + box.w) - 1] == 255


def test_sequence_roundtrip_through_disk(tmp_path):
    seq = synth_sequence(TINY)
    save_sequence(seq, tmp_path / "tiny")
    assert (tmp_path / "tiny" / "img" / "0001.pgm").exists()
    first_line = (tmp_path / "tiny" / GROUNDTRUTH_FILE).read_text().splitlines()[0]
    assert first_line == "11,11,20,16"
    loaded = load_sequence(tmp_path / "tiny")
    assert loaded.name == "tiny"
    assert loaded.truth == seq.truth
    for fa, fb in zip(loaded.frames, seq.frames):
        np.testing.assert_array_equal(fa, fb)


def test_png_frames_need_the_switch(tmp_path, monkeypatch):
    root = tmp_path / "pngseq"
    (root / "img").mkdir(parents=True)
    for i in (1, 2):
        Image.fromarray(np.full((20, 20), 30 * i, dtype=np.uint8)).save(root / "img" / f"{i:04d}.png")
    (root / GROUNDTRUTH_FILE).write_text("2,2,5,5\n3,3,5,5\n")
    monkeypatch.delenv(path_utils.ALLOW_PNG_ENV, raising=False)
    with pytest.raises(IngestionError, match=path_utils.ALLOW_PNG_ENV):
        load_sequence(root)
    monkeypatch.setenv(path_utils.ALLOW_PNG_ENV, "1")
    seq = load_sequence(root)
    assert len(seq) == 2
    assert seq.frames[1][0, 0] == 60


def test_annotation_count_must_match(tmp_path):
    seq = synth_sequence(TINY)
    save_sequence(seq, tmp_path / "tiny")
    (tmp_path / "tiny" / GROUNDTRUTH_FILE).write_text("1,1,5,5\n")
    with pytest.raises(IngestionError):
        load_sequence(tmp_path / "tiny")


def test_ope_perfect_tracking():
    truth = [Box(0, 0, 10, 10), Box(5, 5, 10, 10)]
    result = ope_evaluate(truth, truth)
    assert result.precision_curve == [1.0] * 51
    assert result.precision_20 == 1.0
    # IoU 1 is never strictly above the last threshold
    assert result.success_curve == [1.0] * 20 + [0.0]
    assert result.auc == pytest.approx(20 / 21)


def test_ope_thresholds_are_inclusive_for_precision():
    truth = [Box(0, 0, 10, 10), Box(0, 0, 10, 10)]
    est = [Box(0, 0, 10, 10), Box(10, 0, 10, 10)]
    result = ope_evaluate(est, truth)
    assert result.precision_curve[9] == 0.5
    assert result.precision_curve[10] == 1.0
    assert result.success_curve[0] == 0.5  # IoU 0 is not > 0
    assert result.mean_center_error == pytest.approx(5.0)
    with pytest.raises(InputError):
        ope_evaluate(est, truth[:1])


def test_write_and_read_results(tmp_path):
    truth = [Box(0, 0, 10, 10), Box(1, 1, 10, 10), Box(2, 2, 10, 10)]
    est = [Box(0, 0, 10, 10), Box(2, 1, 10, 10), Box(2, 4, 10, 10)]
    metrics = ope_evaluate(est, truth)
    paths = write_results(tmp_path / "out", est, [1.0, 0.8, 0.6], metrics, {"init": 0.5})
    boxes, scores = read_boxes(paths.boxes)
    assert boxes == est
    assert scores == [1.0, 0.8, 0.6]
    assert read_metrics(paths.metrics) == metrics
    with paths.curves.open() as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["plot", "threshold", "value"]
    assert len(rows) == 1 + 51 + 21
    assert json.loads(paths.timings.read_text()) == {"init": 0.5}
    assert paths.metrics.read_text().endswith("\n")
    with pytest.raises(InputError):
        write_results(tmp_path / "bad", est, [1.0])
