#!/usr/bin/env python3

"""Run config loading, numbered run directories and progress/ETA reporting"""

import json
import sys
from pathlib import Path

import pytest

# Add current directory to path
sys.path.append(str(Path(__file__).parent))

import path_utils
from errors import ConfigurationError
from run_config import allocate_run_dir, config_from_dict, load_run_config, run_metadata
from run_progress import TrackRunState, compute_global_progress, format_progress


def test_defaults():
    cfg = load_run_config()
    assert cfg.backbone == "desk"
    assert cfg.reps == 5
    assert cfg.tracker.score_threshold == 0.5
    assert cfg.backbone_spec().name == "desk"


def test_flat_keys_split_between_run_and_tracker(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"backbone": "vggm-geometry", "reps": 3, "seed": 11, "frame_neg": 50}))
    cfg = load_run_config(path)
    assert cfg.backbone == "vggm-geometry"
    assert cfg.reps == 3
    assert cfg.tracker.seed == 11
    assert cfg.tracker.frame_neg == 50
    data = cfg.to_dict()
    assert data["backbone"] == "vggm-geometry" and data["frame_neg"] == 50
    assert config_from_dict(data).to_dict() == data


def test_overrides_win_unless_none(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 3}))
    assert load_run_config(path, seed=9).tracker.seed == 9
    assert load_run_config(path, seed=None).tracker.seed == 3


def test_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_run_config(bad)
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ConfigurationError):
        load_run_config(listed)
    with pytest.raises(ConfigurationError):
        config_from_dict({"backbone": "alexnet"})
    with pytest.raises(ConfigurationError):
        config_from_dict({"reps": 0})
    with pytest.raises(ConfigurationError):
        config_from_dict({"learning_rate": 0.1})


def test_weights_path_resolution(monkeypatch, tmp_path):
    cfg = config_from_dict({"weights": str(tmp_path / "w.ilnw")})
    assert cfg.weights_path() == tmp_path / "w.ilnw"
    monkeypatch.setenv(path_utils.WEIGHTS_ENV, str(tmp_path / "env.ilnw"))
    path_utils.refresh_roots()
    try:
        assert config_from_dict({}).weights_path() == (tmp_path / "env.ilnw").resolve()
    finally:
        monkeypatch.delenv(path_utils.WEIGHTS_ENV)
        path_utils.refresh_roots()


def test_allocate_run_dir_numbers_sequentially(tmp_path):
    (tmp_path / "0007").mkdir()
    (tmp_path / "notes").mkdir()
    first = allocate_run_dir(tmp_path)
    second = allocate_run_dir(tmp_path)
    assert first.name == "0008"
    assert second.name == "0009"
    assert allocate_run_dir(tmp_path / "fresh").name == "0001"


def test_run_metadata_carries_config():
    cfg = config_from_dict({"seed": 2})
    meta = run_metadata("track", cfg, sequence="synthetic")
    assert meta["command"] == "track"
    assert meta["config"]["seed"] == 2
    assert meta["sequence"] == "synthetic"
    assert "created_at" in meta


def test_progress_eta():
    state = TrackRunState.for_frames("seq", 5)
    assert state.total_frames == 4
    progress = compute_global_progress(state)
    assert progress["percent_complete_0_1"] == 0.0
    assert progress["eta_sec"] is None

    state.finish_frame(1, 2.0, 0.9)
    state.finish_frame(2, 4.0, 0.8)
    progress = compute_global_progress(state)
    assert progress["percent_complete_0_1"] == 0.5
    assert progress["eta_sec"] == pytest.approx(2 * 3.0)
    assert "2/4 frames" in format_progress(state)

    assert state.frames[2].done and not state.frames[3].done
    assert state.frames[2].score == 0.8
    state.mark_finished()
    assert compute_global_progress(state)["eta_sec"] == 0.0


def test_dotenv_values_fill_only_unset_variables(tmp_path, monkeypatch):
    env_file = tmp_path / ".env"
    env_file.write_text(f"{path_utils.OUTPUT_DIR_ENV}=/from/dotenv\n{path_utils.WEIGHTS_ENV}=w.ilnw\n")
    monkeypatch.setenv(path_utils.OUTPUT_DIR_ENV, str(tmp_path / "runs"))
    monkeypatch.setenv(path_utils.WEIGHTS_ENV, "")
    monkeypatch.delenv(path_utils.WEIGHTS_ENV)
    for name in ("CODE_ROOT", "OUTPUT_DIR", "DEFAULT_WEIGHTS"):
        monkeypatch.setattr(path_utils, name, getattr(path_utils, name))

    assert path_utils.load_dotenv is not None
    path_utils.load_dotenv(env_file, override=False)
    path_utils.refresh_roots()
    assert path_utils.OUTPUT_DIR == (tmp_path / "runs").resolve()
    assert path_utils.DEFAULT_WEIGHTS.name == "w.ilnw"
