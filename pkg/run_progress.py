from dataclasses import dataclass, field
from typing import Dict, Optional
import time


@dataclass
class FrameRecord:
    index: int
    done: bool = False
    duration_sec: Optional[float] = None
    score: Optional[float] = None


@dataclass
class TrackRunState:
    sequence: str
    frames: Dict[int, FrameRecord] = field(default_factory=dict)
    run_started_at: float = field(default_factory=time.time)
    run_finished_at: Optional[float] = None

    @classmethod
    def for_frames(cls, sequence: str, n_frames: int) -> "TrackRunState":
        state = cls(sequence=sequence)
        for i in range(1, n_frames):
            state.frames[i] = FrameRecord(index=i)
        return state

    @property
    def total_frames(self) -> int:
        return len(self.frames)

    @property
    def completed_frames(self) -> int:
        return sum(1 for f in self.frames.values() if f.done)

    @property
    def avg_duration_sec(self) -> Optional[float]:
        durations = [f.duration_sec for f in self.frames.values() if f.duration_sec is not None]
        if not durations:
            return None
        return sum(durations) / len(durations)

    def finish_frame(self, index: int, duration_sec: float, score: Optional[float] = None) -> None:
        record = self.frames.setdefault(index, FrameRecord(index=index))
        record.duration_sec = duration_sec
        record.done = True
        record.score = score

    def mark_finished(self):
        if self.run_finished_at is None:
            self.run_finished_at = time.time()


def compute_global_progress(state: TrackRunState) -> dict:
    """
    Percent complete, elapsed time and ETA (average frame time x frames left).
    """
    total = state.total_frames
    if total == 0:
        return {"percent_complete_0_1": 0.0, "eta_sec": None, "elapsed_sec": 0.0}

    if state.run_finished_at is not None:
        elapsed = state.run_finished_at - state.run_started_at
    else:
        elapsed = time.time() - state.run_started_at

    completed = state.completed_frames
    avg_duration = state.avg_duration_sec
    percent_complete = completed / total

    eta = None
    if state.run_finished_at is not None:
        eta = 0.0
    elif avg_duration is not None:
        eta = max(total - completed, 0) * avg_duration

    return {
        "percent_complete_0_1": max(0.0, min(1.0, percent_complete)),
        "eta_sec": eta,
        "elapsed_sec": elapsed,
    }


def format_progress(state: TrackRunState) -> str:
    progress = compute_global_progress(state)
    eta = progress["eta_sec"]
    eta_text = "--" if eta is None else f"{eta:.1f}s"
    return (
        f"{state.sequence}: {state.completed_frames}/{state.total_frames} frames "
        f"({progress['percent_complete_0_1'] * 100:.0f}%), elapsed {progress['elapsed_sec']:.1f}s, ETA {eta_text}"
    )
