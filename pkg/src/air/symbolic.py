"""Symbolic conditioning: piano reduction, block chords, frame features.

Events are plain note records (seconds, MIDI-style pitch/velocity/program).
The reduction keeps the longest non-colliding piano-family notes; chords
render as root-position blocks at beat onsets; both convert to per-frame
chroma vectors or token ids for use as condition sequences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

PIANO_PROGRAMS = range(0, 8)  # General MIDI piano family

QUALITY_INTERVALS = {
    "maj": (0, 4, 7),
    "min": (0, 3, 7),
    "dim": (0, 3, 6),
    "aug": (0, 4, 8),
    "maj7": (0, 4, 7, 11),
    "min7": (0, 3, 7, 10),
    "dom7": (0, 4, 7, 10),
}
NO_CHORD = "N"


@dataclass(frozen=True)
class NoteEvent:
    onset: float
    duration: float
    pitch: int
    velocity: int
    program: int
    track: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0 <= self.pitch <= 127:
            raise ValueError("pitch out of 0..127")
        if not 1 <= self.velocity <= 127:
            raise ValueError("velocity out of 1..127")
        if not 0 <= self.program <= 127:
            raise ValueError("program out of 0..127")

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass(frozen=True)
class ChordSpan:
    start: float
    end: float
    root: int
    quality: str

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError("chord span must have start < end")
        if not 0 <= self.root <= 11:
            raise ValueError("root must be a pitch class 0..11")
        if self.quality != NO_CHORD and self.quality not in QUALITY_INTERVALS:
            raise ValueError(f"unknown chord quality {self.quality!r}")


def check_beats(beats) -> list[float]:
    beats = [float(b) for b in beats]
    if any(b2 <= b1 for b1, b2 in zip(beats, beats[1:])):
        raise ValueError("beat times must be strictly increasing")
    return beats


# ---------------------------------------------------------------------------
# piano reduction
# ---------------------------------------------------------------------------


def _intersects(a: NoteEvent, b: NoteEvent) -> bool:
    return a.onset < b.end and b.onset < a.end


def piano_reduce(events: list[NoteEvent]) -> list[NoteEvent]:
    """Greedy duration-descending reduction to one non-colliding piano part.

    Only piano-family programs enter; an event is kept iff no kept event
    shares its pitch with overlapping [onset, end) intervals.  Equal
    durations break ties by onset, then pitch.  Kept events are rewritten
    to program 0.
    """
    pool = [e for e in events if e.program in PIANO_PROGRAMS]
    pool.sort(key=lambda e: (-e.duration, e.onset, e.pitch))
    kept: list[NoteEvent] = []
    by_pitch: dict[int, list[NoteEvent]] = {}
    for e in pool:
        if any(_intersects(e, other) for other in by_pitch.get(e.pitch, ())):
            continue
        e0 = replace(e, program=0)
        kept.append(e0)
        by_pitch.setdefault(e.pitch, []).append(e0)
    return kept


# ---------------------------------------------------------------------------
# block chords
# ---------------------------------------------------------------------------


def render_block_chords(chords: list[ChordSpan], beats) -> list[NoteEvent]:
    """Strike each beat's governing chord as a root-position block.

    The block lasts until the next beat; the final beat's block lasts to
    the end of its chord span.  Beats outside every span, and beats under
    a no-chord span, emit nothing.
    """
    beats = check_beats(beats)
    out: list[NoteEvent] = []
    for bi, b in enumerate(beats):
        span = next((s for s in chords if s.start <= b < s.end), None)
        if span is None or span.quality == NO_CHORD:
            continue
        dur = (beats[bi + 1] - b) if bi + 1 < len(beats) else (span.end - b)
        if dur <= 0:
            continue
        for iv in QUALITY_INTERVALS[span.quality]:
            out.append(NoteEvent(onset=b, duration=dur, pitch=60 + span.root + iv,
                                 velocity=80, program=0, track=0))
    return out


# ---------------------------------------------------------------------------
# frame features
# ---------------------------------------------------------------------------


def _active_sets(events: list[NoteEvent], T: int, fps: float) -> list[int]:
    """Per-frame 12-bit pitch-class activation bitmask."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    bits = [0] * T
    for e in events:
        first = max(0, int(np.floor(e.onset * fps)))
        last = min(T - 1, int(np.ceil(e.end * fps)) - 1)
        for t in range(first, last + 1):
            # half-open intervals: the note must actually cover the frame
            if e.onset < (t + 1) / fps and e.end > t / fps:
                bits[t] |= 1 << (e.pitch % 12)
    return bits


def events_to_chroma(events: list[NoteEvent], T: int, fps: float) -> np.ndarray:
    """Binary T x 12 pitch-class activations."""
    bits = _active_sets(events, T, fps)
    out = np.zeros((T, 12), dtype=np.float64)
    for t, b in enumerate(bits):
        for pc in range(12):
            if b & (1 << pc):
                out[t, pc] = 1.0
    return out


def events_to_tokens(events: list[NoteEvent], T: int, fps: float,
                     vocab: int) -> np.ndarray:
    """Hash each frame's pitch-class set into a stable token id.

    Token 0 is reserved for silence; active sets map into 1..vocab-1 by
    Knuth multiplicative hashing of the 12-bit set, so equal pitch content
    always yields equal tokens, in this process and every other.
    """
    if vocab < 2:
        raise ValueError("vocab must be >= 2")
    bits = _active_sets(events, T, fps)
    out = np.zeros((T, 1), dtype=np.int64)
    for t, b in enumerate(bits):
        if b:
            out[t, 0] = 1 + (b * 2654435761) % (vocab - 1)
    return out


# ---------------------------------------------------------------------------
# line-oriented file formats
# ---------------------------------------------------------------------------


def write_events(path, events: list[NoteEvent]) -> None:
    """JSONL out; `path` may also be an open text stream (e.g. stdout)."""
    def dump(f):
        for e in events:
            f.write(json.dumps({"onset": e.onset, "duration": e.duration,
                                "pitch": e.pitch, "velocity": e.velocity,
                                "program": e.program, "track": e.track},
                               separators=(", ", ": ")) + "\n")

    if hasattr(path, "write"):
        dump(path)
    else:
        with open(path, "w", newline="\n") as f:
            dump(f)


def read_events(path) -> list[NoteEvent]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(NoteEvent(onset=float(rec["onset"]),
                                 duration=float(rec["duration"]),
                                 pitch=int(rec["pitch"]),
                                 velocity=int(rec["velocity"]),
                                 program=int(rec["program"]),
                                 track=int(rec.get("track", 0))))
    return out


def read_chords(path) -> list[ChordSpan]:
    out = []
    with open(path) as f:
        for line in f:
            body = line.strip()
            if not body or body.startswith("#"):
                continue
            start, end, root, quality = body.split()
            out.append(ChordSpan(float(start), float(end), int(root), quality))
    return out


def write_chords(path, chords: list[ChordSpan]) -> None:
    with open(path, "w", newline="\n") as f:
        for s in chords:
            f.write(f"{s.start:g} {s.end:g} {s.root} {s.quality}\n")


def read_beats(path) -> list[float]:
    with open(path) as f:
        return check_beats(float(line) for line in f if line.strip())


def write_beats(path, beats) -> None:
    with open(path, "w", newline="\n") as f:
        for b in check_beats(beats):
            f.write(f"{b:g}\n")
