"""Dataset manifests, on-disk containers and clip indexing.

On-disk layout (all paths in the manifest are relative to its directory):

* ``manifest.json``   -- see ``MANIFEST_SCHEMA``
* ``frames/<id>.npy`` -- little-endian float32 ``(N, H, W, C)`` array in [0, 1]
  (the standard ``.npy`` container: magic, header with dtype and shape, payload)
* ``labels/<id>.csv`` -- ``timestamp,label`` with one row per frame
* ``streams/<id>.csv`` -- ``timestamp,<name> [<unit>],...`` at the stream's own rate
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import jsonschema
import numpy as np

from .backbone import VideoClip
from .errors import SchemaError, ShapeError
from .stream_encoder import StreamSeries

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
TASKS = {"phase": 14, "binary-los": 2, "binary-cci": 2, "synthetic": None, "unlabeled": None}
BLUE = np.array([0.0, 0.0, 1.0])

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "task", "videos", "splits"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": 1},
        "task": {
            "type": "object",
            "required": ["name", "n_classes"],
            "additionalProperties": False,
            "properties": {
                "name": {"enum": sorted(TASKS)},
                "n_classes": {"type": "integer", "minimum": 1},
                "exception_class": {"type": ["integer", "null"], "minimum": 0},
            },
        },
        "videos": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "frames", "fps", "n_frames"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "frames": {"type": "string"},
                    "fps": {"type": "number", "exclusiveMinimum": 0},
                    "n_frames": {"type": "integer", "minimum": 1},
                    "duration": {"type": "number", "exclusiveMinimum": 0},
                    "labels": {"type": ["string", "null"]},
                    "streams": {"type": ["string", "null"]},
                },
            },
        },
        "splits": {
            "type": "object",
            "additionalProperties": False,
            "properties": {s: {"type": "array", "items": {"type": "string"}} for s in SPLITS},
        },
        "outcomes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id"],
                "properties": {
                    "id": {"type": "string"},
                    "los": {"type": "number", "minimum": 0},
                    "cci": {"type": "number", "minimum": 0, "maximum": 100},
                },
            },
        },
    },
}


@dataclass
class VideoEntry:
    id: str
    frames: str
    fps: float
    n_frames: int
    duration: float | None = None
    labels: str | None = None
    streams: str | None = None

    def __post_init__(self):
        if self.duration is None:
            self.duration = self.n_frames / self.fps


@dataclass
class OutcomeRecord:
    id: str
    los: float | None = None
    cci: float | None = None

    def __post_init__(self):
        if self.los is not None and self.los < 0:
            raise ValueError(f"{self.id}: length of stay must be >= 0")
        if self.cci is not None and not 0.0 <= self.cci <= 100.0:
            raise ValueError(f"{self.id}: CCI must lie in [0, 100]")


@dataclass
class DatasetManifest:
    task: str
    n_classes: int
    videos: list[VideoEntry]
    splits: dict[str, list[str]]
    exception_class: int | None = None
    outcomes: list[OutcomeRecord] = field(default_factory=list)

    def __post_init__(self):
        validate_manifest(self)

    def video(self, vid: str) -> VideoEntry:
        for v in self.videos:
            if v.id == vid:
                return v
        raise KeyError(vid)

    def split_of(self, vid: str) -> str:
        for name, ids in self.splits.items():
            if vid in ids:
                return name
        raise KeyError(vid)

    def to_json(self) -> dict:
        doc = {
            "version": 1,
            "task": {"name": self.task, "n_classes": self.n_classes, "exception_class": self.exception_class},
            "videos": [{k: v for k, v in asdict(e).items() if v is not None} for e in self.videos],
            "splits": {k: list(v) for k, v in self.splits.items()},
        }
        if self.outcomes:
            doc["outcomes"] = [{k: v for k, v in asdict(o).items() if v is not None} for o in self.outcomes]
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "DatasetManifest":
        _schema_check(doc)
        task = doc["task"]
        try:
            return cls(
                task=task["name"],
                n_classes=task["n_classes"],
                exception_class=task.get("exception_class"),
                videos=[VideoEntry(**v) for v in doc["videos"]],
                splits={k: list(v) for k, v in doc["splits"].items()},
                outcomes=[OutcomeRecord(**o) for o in doc.get("outcomes", [])],
            )
        except ValueError as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(str(exc)) from exc


def _schema_check(doc):
    errors = sorted(jsonschema.Draft7Validator(MANIFEST_SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.path) or "<root>"
        raise SchemaError(err.message, field=where)


def validate_manifest(m: DatasetManifest) -> None:
    if m.task not in TASKS:
        raise SchemaError(f"unknown task {m.task!r}", field="task/name")
    expected = TASKS[m.task]
    if expected is not None and m.n_classes != expected:
        raise SchemaError(f"task {m.task} has {expected} classes, manifest says {m.n_classes}", field="task/n_classes")
    if m.task != "unlabeled" and m.n_classes < 2:
        raise SchemaError("labelled tasks need at least two classes", field="task/n_classes")
    if m.exception_class is not None and not 0 <= m.exception_class < m.n_classes:
        raise SchemaError("exception class out of range", field="task/exception_class")
    ids = [v.id for v in m.videos]
    dupes = [k for k, n in Counter(ids).items() if n > 1]
    if dupes:
        raise SchemaError(f"duplicate video ids {dupes}", field="videos")
    for i, v in enumerate(m.videos):
        if m.task != "unlabeled" and not v.labels:
            raise SchemaError("labelled task requires a label track", field=f"videos/{i}/labels")
        if abs(v.duration - v.n_frames / v.fps) > 1.0 / v.fps:
            raise SchemaError("duration disagrees with n_frames / fps", field=f"videos/{i}/duration")
    unknown = set(m.splits) - set(SPLITS)
    if unknown:
        raise SchemaError(f"unknown split names {sorted(unknown)}", field="splits")
    seen: dict[str, str] = {}
    for name, members in m.splits.items():
        for vid in members:
            if vid in seen:
                raise SchemaError(f"video {vid!r} in both {seen[vid]!r} and {name!r}", field=f"splits/{name}")
            seen[vid] = name
    missing = set(ids) - set(seen)
    extra = set(seen) - set(ids)
    if missing:
        raise SchemaError(f"videos without split: {sorted(missing)}", field="splits")
    if extra:
        raise SchemaError(f"split lists unknown videos: {sorted(extra)}", field="splits")


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"manifest not found: {path}", field="manifest")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", field="manifest") from exc
    return DatasetManifest.from_json(doc)


# -- CSV / raw containers ---------------------------------------------------

_UNIT_RE = re.compile(r"^(?P<name>.*?)\s*\[(?P<unit>[^\]]*)\]\s*$")


def write_label_csv(path, timestamps, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "label"])
        for t, y in zip(timestamps, labels):
            w.writerow([repr(float(t)), int(y)])


def read_label_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["timestamp", "label"]:
        raise SchemaError("label CSV must start with header 'timestamp,label'", field=str(path))
    body = rows[1:]
    return np.array([float(r[0]) for r in body]), np.array([int(r[1]) for r in body], dtype=np.int64)


def write_stream_csv(path, stream: StreamSeries) -> None:
    header = ["timestamp"] + [f"{n} [{u}]" for n, u in zip(stream.names, stream.units)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, t in enumerate(stream.timestamps):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in stream.values[:, i]])


def read_stream_csv(path) -> StreamSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "timestamp":
        raise SchemaError("stream CSV must start with a 'timestamp' column", field=str(path))
    names, units = [], []
    for col in rows[0][1:]:
        m = _UNIT_RE.match(col)
        names.append(m.group("name") if m else col)
        units.append(m.group("unit") if m else "")
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(rows[0]))
    return StreamSeries(data[:, 1:].T, data[:, 0], names, units)


def write_frames(path, frames: np.ndarray) -> None:
    np.save(path, np.ascontiguousarray(frames, dtype="<f4"), allow_pickle=False)


def read_frames(path) -> np.ndarray:
    return np.load(path, mmap_mode="r", allow_pickle=False)


# -- per-frame operations ---------------------------------------------------


def detect_out_of_body(frame, tolerance: float = 0.1, min_fraction: float = 0.99) -> bool:
    """True when more than ``min_fraction`` of pixels are within ``tolerance`` of pure blue."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ShapeError(f"expected an H x W x 3 frame, got {frame.shape}")
    return bool(_blue_fraction(frame[None], tolerance)[0] > min_fraction)


def _blue_fraction(frames: np.ndarray, tolerance: float) -> np.ndarray:
    if frames.dtype == np.uint8:
        frames = frames / 255.0
    near = np.abs(frames - BLUE).max(axis=-1) <= tolerance
    return near.reshape(len(frames), -1).mean(axis=1)


def out_of_body_segments(frames: np.ndarray, fps: float, tolerance=0.1, min_fraction=0.99):
    """Half-open [start, end) second intervals covered by blue frames."""
    flags = _blue_fraction(np.asarray(frames), tolerance) > min_fraction
    segments = []
    start = None
    for i, f in enumerate(np.append(flags, False)):
        if f and start is None:
            start = i
        elif not f and start is not None:
            segments.append((start / fps, i / fps))
            start = None
    return segments


def dense_clip_index(duration, clip_duration, interval=1.0, skipped: Iterable[tuple[float, float]] = ()):
    """Anchors ``0, interval, 2*interval, ...`` whose clip ``[t, t + clip)`` fits and avoids ``skipped``."""
    if clip_duration > duration + 1e-9:
        raise ValueError(f"clip of {clip_duration} s longer than video of {duration} s")
    if interval <= 0:
        raise ValueError("interval must be positive")
    count = int(math.floor((duration - clip_duration) / interval + 1e-9)) + 1
    skipped = list(skipped)
    anchors = []
    for i in range(count):
        t = i * interval
        if any(t < b and t + clip_duration > a for a, b in skipped):
            continue
        anchors.append(t)
    return anchors


def resample_stream(stream: StreamSeries, frame_timestamps) -> StreamSeries:
    """Linear interpolation onto ``frame_timestamps``, holding end values outside the range."""
    if len(stream) == 0:
        raise ValueError("cannot resample an empty stream")
    query = np.asarray(frame_timestamps, dtype=np.float64)
    values = np.stack([np.interp(query, stream.timestamps, ch) for ch in stream.values])
    return StreamSeries(values, query, list(stream.names), list(stream.units))


def binarize_by_median(values: Mapping[str, float], fit_ids: Iterable[str] | None = None):
    """Class 0 for values at or below the median, class 1 above.

    The median is taken over ``fit_ids`` when given (e.g. the training split),
    otherwise over all values. Returns ``(labels, threshold)``.
    """
    if not values:
        raise ValueError("binarize_by_median needs at least one value")
    pool = [values[k] for k in fit_ids] if fit_ids is not None else list(values.values())
    if not pool:
        raise ValueError("no values to fit the median on")
    threshold = float(np.median(pool))
    return apply_threshold(values, threshold), threshold


def apply_threshold(values: Mapping[str, float], threshold: float) -> dict[str, int]:
    return {k: int(v > threshold) for k, v in values.items()}


# -- clips ------------------------------------------------------------------


@dataclass(frozen=True)
class ClipConfig:
    num_frames: int = 16
    frame_step: int = 1

    def span(self) -> int:
        return self.num_frames * self.frame_step

    def duration(self, fps: float) -> float:
        return self.span() / fps


@dataclass
class ClipSample:
    corpus: "Corpus" = field(repr=False)
    video_id: str
    anchor_time: float
    label: int
    start_frame: int
    config: ClipConfig

    @property
    def frame_indices(self) -> np.ndarray:
        return self.start_frame + self.config.frame_step * np.arange(self.config.num_frames)

    @property
    def clip(self) -> VideoClip:
        frames = self.corpus.frames(self.video_id)
        idx = self.frame_indices
        return VideoClip(np.asarray(frames[idx], dtype=np.float32), self.corpus.entry(self.video_id).fps, self.anchor_time)

    @property
    def stream_window(self) -> StreamSeries:
        s = self.corpus.streams(self.video_id)
        idx = self.frame_indices
        return StreamSeries(s.values[:, idx], s.timestamps[idx], list(s.names), list(s.units))


@dataclass(frozen=True)
class SyntheticSpec:
    n_videos: int = 12
    duration: float = 60.0
    fps: float = 2.0
    height: int = 16
    width: int = 16
    n_channels: int = 4
    label_source: str = "streams"
    n_classes: int = 2
    segment_seconds: float = 10.0
    stream_rate: float = 1.0
    split_counts: tuple[int, int, int] = (6, 2, 4)
    video_signal: float = 0.15
    stream_signal: float = 1.0
    blue_segments: int = 0

    def __post_init__(self):
        if self.label_source not in ("video", "streams", "both"):
            raise ValueError(f"label_source must be video, streams or both, got {self.label_source!r}")
        if self.n_classes < 2 or self.n_videos < 1 or self.n_channels < 1:
            raise ValueError("synthetic spec needs >= 2 classes, >= 1 video and >= 1 channel")
        if sum(self.split_counts) != self.n_videos:
            raise ValueError("split_counts must add up to n_videos")
        if self.fps <= 0 or self.duration <= 0 or self.stream_rate <= 0:
            raise ValueError("fps, duration and stream_rate must be positive")


class Corpus:
    """A manifest plus access to its frames, label tracks and streams.

    Arrays are either supplied in memory or read lazily from ``root``.
    """

    def __init__(self, manifest: DatasetManifest, root=None, arrays: dict | None = None):
        self.manifest = manifest
        self.root = Path(root) if root is not None else None
        self._arrays: dict[str, dict] = {k: dict(v) for k, v in (arrays or {}).items()}
        self._resampled: dict[str, StreamSeries] = {}
        self._segments: dict[str, list] = {}

    @classmethod
    def load(cls, manifest_path) -> "Corpus":
        manifest_path = Path(manifest_path)
        corpus = cls(load_manifest(manifest_path), manifest_path.parent)
        for v in corpus.manifest.videos:
            if v.labels:
                n = len(corpus.labels(v.id))
                if n != v.n_frames:
                    raise SchemaError(f"label track has {n} rows, video has {v.n_frames} frames", field=f"videos/{v.id}/labels")
        corpus.log_split_balance()
        return corpus

    def entry(self, vid: str) -> VideoEntry:
        return self.manifest.video(vid)

    def _slot(self, vid):
        return self._arrays.setdefault(vid, {})

    def _path(self, rel):
        if self.root is None:
            raise FileNotFoundError(f"no data root to resolve {rel}")
        return self.root / rel

    def frames(self, vid: str) -> np.ndarray:
        slot = self._slot(vid)
        if "frames" not in slot:
            slot["frames"] = read_frames(self._path(self.entry(vid).frames))
        return slot["frames"]

    def labels(self, vid: str) -> np.ndarray:
        slot = self._slot(vid)
        if "labels" not in slot:
            rel = self.entry(vid).labels
            if not rel:
                raise KeyError(f"video {vid} has no label track")
            slot["labels"] = read_label_csv(self._path(rel))[1]
        return slot["labels"]

    def raw_streams(self, vid: str) -> StreamSeries:
        slot = self._slot(vid)
        if "streams" not in slot:
            rel = self.entry(vid).streams
            if not rel:
                raise KeyError(f"video {vid} has no streams")
            slot["streams"] = read_stream_csv(self._path(rel))
        return slot["streams"]

    def has_streams(self) -> bool:
        return all(v.streams or "streams" in self._arrays.get(v.id, {}) for v in self.manifest.videos)

    def frame_timestamps(self, vid: str) -> np.ndarray:
        e = self.entry(vid)
        return np.arange(e.n_frames) / e.fps

    def streams(self, vid: str) -> StreamSeries:
        """Streams resampled onto the video's frame timestamps."""
        if vid not in self._resampled:
            self._resampled[vid] = resample_stream(self.raw_streams(vid), self.frame_timestamps(vid))
        return self._resampled[vid]

    def skipped_segments(self, vid: str):
        if vid not in self._segments:
            self._segments[vid] = out_of_body_segments(self.frames(vid), self.entry(vid).fps)
        return self._segments[vid]

    def samples(self, split: str, config: ClipConfig, interval: float = 1.0, skip_out_of_body: bool = True):
        if split not in self.manifest.splits:
            raise KeyError(f"manifest has no {split!r} split")
        out = []
        for vid in self.manifest.splits[split]:
            e = self.entry(vid)
            skipped = self.skipped_segments(vid) if skip_out_of_body else ()
            track = self.labels(vid) if e.labels or "labels" in self._arrays.get(vid, {}) else None
            for t in dense_clip_index(e.n_frames / e.fps, config.duration(e.fps), interval, skipped):
                start = int(round(t * e.fps))
                label = int(track[start]) if track is not None else -1
                out.append(ClipSample(self, vid, t, label, start, config))
        return out

    def log_split_balance(self) -> dict:
        stats = {}
        if self.manifest.task == "unlabeled":
            return stats
        for split, ids in self.manifest.splits.items():
            counts = Counter()
            for vid in ids:
                counts.update(self.labels(vid).tolist())
            e = {vid: self.entry(vid) for vid in ids}
            stats[split] = {"videos": len(ids), "frames_per_class": dict(sorted(counts.items())),
                            "hours": sum(x.duration for x in e.values()) / 3600.0}
            logger.info("split %s: %d videos, frames per class %s", split, len(ids), dict(sorted(counts.items())))
        return stats

    def write(self, root) -> Path:
        root = Path(root)
        for sub in ("frames", "labels", "streams"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        videos = []
        for e in self.manifest.videos:
            entry = VideoEntry(e.id, f"frames/{e.id}.npy", e.fps, e.n_frames, e.duration)
            write_frames(root / entry.frames, self.frames(e.id))
            if e.labels or "labels" in self._arrays.get(e.id, {}):
                entry.labels = f"labels/{e.id}.csv"
                write_label_csv(root / entry.labels, self.frame_timestamps(e.id), self.labels(e.id))
            if e.streams or "streams" in self._arrays.get(e.id, {}):
                entry.streams = f"streams/{e.id}.csv"
                write_stream_csv(root / entry.streams, self.raw_streams(e.id))
            videos.append(entry)
        m = self.manifest
        out = DatasetManifest(m.task, m.n_classes, videos, m.splits, m.exception_class, m.outcomes)
        return write_manifest(out, root / "manifest.json")


def _smooth_noise(rng, shape, width):
    raw = rng.standard_normal(shape)
    if width <= 1:
        return raw
    kernel = np.ones(width) / np.sqrt(width)
    return np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), -1, raw)


def make_synthetic_dataset(seed: int, spec: SyntheticSpec = SyntheticSpec()) -> Corpus:
    """Generate a labelled corpus whose label lives in the video, the streams, or both.

    Label tracks are piecewise constant over ``segment_seconds`` blocks with
    classes dealt out evenly and shuffled per video. Video frames are
    per-pixel noise around a brightness level; stream channels are smoothed
    noise around a per-channel baseline. Whichever modality is not named by
    ``label_source`` is drawn without looking at the labels.
    """
    rng = np.random.default_rng(seed)
    n_frames = int(round(spec.duration * spec.fps))
    n_stream = int(round(spec.duration * spec.stream_rate))
    n_seg = int(math.ceil(spec.duration / spec.segment_seconds))
    k = spec.n_classes
    level = (2.0 * np.arange(k) / (k - 1) - 1.0)  # in [-1, 1]
    names = [f"stream{i}" for i in range(spec.n_channels)]
    units = ["a.u."] * spec.n_channels

    videos, arrays = [], {}
    for i in range(spec.n_videos):
        vid = f"synth{i:03d}"
        seg_classes = rng.permutation(np.resize(np.arange(k), n_seg))
        t_frame = np.arange(n_frames) / spec.fps
        labels = seg_classes[np.minimum((t_frame // spec.segment_seconds).astype(int), n_seg - 1)]

        frames = 0.5 + 0.1 * rng.standard_normal((n_frames, spec.height, spec.width, 3))
        if spec.label_source in ("video", "both"):
            frames += spec.video_signal * level[labels][:, None, None, None]
        for _ in range(spec.blue_segments):
            length = max(1, int(round(2 * spec.fps)))
            start = int(rng.integers(0, max(1, n_frames - length)))
            frames[start : start + length] = BLUE
        frames = np.clip(frames, 0.0, 1.0).astype(np.float32)

        t_stream = np.arange(n_stream) / spec.stream_rate + 0.5 / spec.stream_rate
        baseline = rng.uniform(-1.0, 1.0, size=(spec.n_channels, 1))
        values = baseline + 0.5 * _smooth_noise(rng, (spec.n_channels, n_stream), 3)
        if spec.label_source in ("streams", "both"):
            seg_at = np.minimum((t_stream // spec.segment_seconds).astype(int), n_seg - 1)
            values = values + spec.stream_signal * level[seg_classes[seg_at]][None, :]

        arrays[vid] = {
            "frames": frames,
            "labels": labels.astype(np.int64),
            "streams": StreamSeries(values, t_stream, list(names), list(units)),
        }
        videos.append(VideoEntry(vid, f"frames/{vid}.npy", spec.fps, n_frames, labels=f"labels/{vid}.csv",
                                 streams=f"streams/{vid}.csv"))

    a, b, _ = spec.split_counts
    ids = [v.id for v in videos]
    splits = {"train": ids[:a], "val": ids[a : a + b], "test": ids[a + b :]}
    manifest = DatasetManifest("synthetic", k, videos, splits)
    return Corpus(manifest, arrays=arrays)


def sample_class_frequencies(labels: Sequence[int]) -> dict[int, float]:
    counts = Counter(int(x) for x in labels)
    n = sum(counts.values())
    return {c: counts[c] / n for c in sorted(counts)}
