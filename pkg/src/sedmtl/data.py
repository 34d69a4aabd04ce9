"""TUT-style metadata ingestion, frame targets, folds and training chunks.

Metadata is one `audio_path TAB scene_name` line per clip; per-clip event
annotations are `onset TAB offset TAB event_name` lines with times in
seconds. Event activity is quantized to frames by the frame-center rule:
class m is active in frame n iff some annotation of m satisfies
onset <= (n + 0.5) * hop < offset.
"""

import json
from dataclasses import dataclass, field
from pathlib import PurePosixPath

import numpy as np

from .errors import ArgumentError, ParseError, VocabularyError


@dataclass
class Vocabulary:
    """Ordered scene and event class names; order is frozen once persisted."""

    scenes: list[str]
    events: list[str]

    def __post_init__(self):
        for kind, names in (("scene", self.scenes), ("event", self.events)):
            if len(set(names)) != len(names):
                raise ArgumentError(f"duplicate {kind} names in vocabulary")

    @property
    def n_scenes(self) -> int:
        return len(self.scenes)

    @property
    def n_events(self) -> int:
        return len(self.events)

    def scene_index(self, name: str) -> int:
        try:
            return self.scenes.index(name)
        except ValueError:
            raise VocabularyError(f"unknown scene name {name!r}") from None

    def event_index(self, name: str) -> int:
        try:
            return self.events.index(name)
        except ValueError:
            raise VocabularyError(f"unknown event name {name!r}") from None

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"scenes": self.scenes, "events": self.events}, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(scenes=list(doc["scenes"]), events=list(doc["events"]))


@dataclass
class ClipRecord:
    clip_id: str
    audio_path: str
    scene: int
    events: list = field(default_factory=list)  # (onset_s, offset_s, event_idx)
    annotation_path: str = ""


@dataclass
class EventRoll:
    data: np.ndarray  # (n_events, n_frames), entries 0.0 or 1.0
    hop_seconds: float


@dataclass
class FoldSplit:
    assignment: dict  # clip_id -> fold index
    n_folds: int

    def fold_of(self, clip_id: str) -> int:
        return self.assignment[clip_id]

    def clips_in_fold(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.assignment.items() if f == fold)


def clip_id_from_path(audio_path: str) -> str:
    return PurePosixPath(audio_path.replace("\\", "/")).stem


def parse_metadata(text: str, vocabulary: Vocabulary) -> list[ClipRecord]:
    """Parse `audio_path TAB scene_name` lines into clip stubs.

    Malformed lines raise immediately with their line number; unknown scene
    names are collected and reported together.
    """
    records = []
    unknown = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ParseError(f"expected 'audio_path<TAB>scene', got {line!r}", lineno)
        audio_path, scene_name = parts
        if scene_name not in vocabulary.scenes:
            unknown.append(scene_name)
            continue
        records.append(
            ClipRecord(
                clip_id=clip_id_from_path(audio_path),
                audio_path=audio_path,
                scene=vocabulary.scenes.index(scene_name),
            )
        )
    if unknown:
        names = ", ".join(repr(n) for n in sorted(set(unknown)))
        raise VocabularyError(f"unknown scene names: {names}")
    return records


def parse_event_annotations(text: str, clip_id: str, vocabulary: Vocabulary) -> list:
    """Parse `onset TAB offset TAB event_name` lines, sorted by onset.

    Overlapping events are legal (polyphony).
    """
    events = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise ParseError(
                f"{clip_id}: expected 'onset<TAB>offset<TAB>event', got {line!r}",
                lineno,
            )
        try:
            onset, offset = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"{clip_id}: non-numeric time in {line!r}", lineno) from None
        if not 0.0 <= onset < offset:
            raise ParseError(
                f"{clip_id}: need 0 <= onset < offset, got {onset} .. {offset}", lineno
            )
        events.append((onset, offset, vocabulary.event_index(parts[2])))
    events.sort(key=lambda e: e[0])
    return events


def events_to_roll(
    events, n_frames: int, hop_seconds: float, n_event_classes: int
) -> EventRoll:
    """Binary (M, N) activity matrix under the frame-center rule. Activity
    past the last frame is clipped silently; see count_clipped_events.
    """
    if n_frames < 1 or hop_seconds <= 0.0:
        raise ArgumentError(f"need n_frames >= 1 and hop > 0, got {n_frames}, {hop_seconds}")
    data = np.zeros((n_event_classes, n_frames))
    centers = (np.arange(n_frames) + 0.5) * hop_seconds
    for onset, offset, cls in events:
        data[cls, (onset <= centers) & (centers < offset)] = 1.0
    return EventRoll(data=data, hop_seconds=hop_seconds)


def count_clipped_events(events, n_frames: int, hop_seconds: float) -> int:
    """How many annotations extend past the last frame center."""
    clip_end = (n_frames - 1 + 0.5) * hop_seconds
    return sum(1 for _, offset, _ in events if offset > clip_end)


def roll_to_intervals(roll: EventRoll) -> list:
    """Maximal runs of active frames mapped back to (onset, offset, class)."""
    intervals = []
    hop = roll.hop_seconds
    for cls in range(roll.data.shape[0]):
        row = roll.data[cls]
        padded = np.concatenate([[0.0], row, [0.0]])
        starts = np.flatnonzero((padded[1:-1] == 1.0) & (padded[:-2] == 0.0))
        ends = np.flatnonzero((padded[1:-1] == 1.0) & (padded[2:] == 0.0))
        for n0, n1 in zip(starts, ends):
            intervals.append((n0 * hop, (n1 + 1) * hop, cls))
    intervals.sort(key=lambda e: (e[0], e[2]))
    return intervals


def make_folds(records, n_folds: int = 4, seed: int = 0) -> FoldSplit:
    """Scene-stratified fold assignment, deterministic for a given seed.

    Clips are grouped by scene, shuffled within each group, and dealt to
    folds with a cursor that runs across groups, so both per-scene and total
    fold sizes differ by at most one.
    """
    if len(records) < n_folds:
        raise ArgumentError(
            f"need at least {n_folds} clips for {n_folds} folds, got {len(records)}"
        )
    rng = np.random.default_rng(seed)
    by_scene: dict[int, list[str]] = {}
    for rec in records:
        by_scene.setdefault(rec.scene, []).append(rec.clip_id)
    assignment = {}
    cursor = 0
    for scene in sorted(by_scene):
        clip_ids = sorted(by_scene[scene])
        order = rng.permutation(len(clip_ids))
        for i in order:
            assignment[clip_ids[i]] = cursor % n_folds
            cursor += 1
    return FoldSplit(assignment=assignment, n_folds=n_folds)


@dataclass
class Chunk:
    features: np.ndarray  # (n_bands, chunk_len)
    roll: np.ndarray  # (n_events, chunk_len)
    mask: np.ndarray  # (chunk_len,), 1.0 on valid frames
    clip_id: str
    start_frame: int


def chunk_clips(features, roll: EventRoll, chunk_len: int = 500, clip_id: str = "") -> list:
    """Cut a clip into consecutive fixed-length chunks; the final chunk is
    zero-padded and its mask marks the padded frames invalid.
    """
    data = features.data if hasattr(features, "hop_seconds") else np.asarray(features)
    if data.shape[1] != roll.data.shape[1]:
        raise ArgumentError(
            f"features have {data.shape[1]} frames but roll has {roll.data.shape[1]}"
        )
    if chunk_len < 1:
        raise ArgumentError(f"chunk_len must be >= 1, got {chunk_len}")
    n = data.shape[1]
    chunks = []
    for start in range(0, n, chunk_len):
        valid = min(chunk_len, n - start)
        f = np.zeros((data.shape[0], chunk_len))
        r = np.zeros((roll.data.shape[0], chunk_len))
        m = np.zeros(chunk_len)
        f[:, :valid] = data[:, start : start + valid]
        r[:, :valid] = roll.data[:, start : start + valid]
        m[:valid] = 1.0
        chunks.append(Chunk(features=f, roll=r, mask=m, clip_id=clip_id, start_frame=start))
    return chunks


def write_manifest(path, entries: dict):
    """Persist clip_id -> {audio_path, annotation_path, scene, fold}."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
