"""Phase-recognition style metrics over densely sampled clips.

IoU is computed per (video, class) on anchor-level predictions; the pooled
set of those values is summarised by mean (aIoU), median (mIoU) and the 1/6
quantile (qIoU). Accuracy is pooled over all anchors of all videos.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .datapipe import ClipConfig, Corpus
from .decoder import predict
from .features import FeatureStore

QUANTILE = 1.0 / 6.0
QUANTILE_CONVENTION = "linear interpolation between order statistics (numpy 'linear', h = (n-1)q)"
AGGREGATION = "per-video per-class IoU values pooled over the split"
ACCURACY_POOLING = "anchor-level, pooled over all videos"


@dataclass
class PredictionTrack:
    video_id: str
    anchors: np.ndarray
    pred: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.pred = np.asarray(self.pred, dtype=np.int64)
        self.gt = np.asarray(self.gt, dtype=np.int64)
        if not (self.anchors.shape == self.pred.shape == self.gt.shape) or self.anchors.ndim != 1:
            raise ValueError("anchors, pred and gt must be equal-length vectors")
        if self.anchors.size > 1 and not np.all(np.diff(self.anchors) > 0):
            raise ValueError("anchors must be strictly increasing")
        if (self.pred < 0).any() or (self.gt < 0).any():
            raise ValueError("class indices must be non-negative")

    def __len__(self):
        return self.anchors.size


def per_class_iou(track: PredictionTrack, cls: int, n_classes: int | None = None) -> float | None:
    """IoU of class ``cls`` on one track; ``None`` when neither pred nor gt contain it."""
    if len(track) == 0:
        raise ValueError("empty track")
    if cls < 0 or (n_classes is not None and cls >= n_classes):
        raise ValueError(f"class {cls} out of range")
    p, g = track.pred == cls, track.gt == cls
    union = np.count_nonzero(p | g)
    if union == 0:
        return None
    return np.count_nonzero(p & g) / union


def aggregate(values: Sequence[float]) -> tuple[float, float, float]:
    """(mean, median, 1/6 quantile) of a list of IoU values."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate an empty list")
    return float(arr.mean()), float(np.median(arr)), float(np.quantile(arr, QUANTILE, method="linear"))


def _as_tracks(tracks) -> list[PredictionTrack]:
    return [tracks] if isinstance(tracks, PredictionTrack) else list(tracks)


def accuracy(tracks: PredictionTrack | Iterable[PredictionTrack], exclude_class: int | None = None) -> float:
    tracks = _as_tracks(tracks)
    pred = np.concatenate([t.pred for t in tracks]) if tracks else np.empty(0, dtype=np.int64)
    gt = np.concatenate([t.gt for t in tracks]) if tracks else np.empty(0, dtype=np.int64)
    if exclude_class is not None:
        keep = gt != exclude_class
        pred, gt = pred[keep], gt[keep]
    if gt.size == 0:
        raise ValueError("accuracy of an empty track")
    return float(np.mean(pred == gt))


@dataclass
class MetricsReport:
    per_video_iou: dict[str, dict[int, float]]
    aiou: float
    miou: float
    qiou: float
    acc: float
    include_exception_class: bool
    exception_class: int | None
    n_anchors: int
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "metrics": {"aIoU": self.aiou, "mIoU": self.miou, "qIoU": self.qiou, "Acc": self.acc},
            "per_video_iou": {v: {str(c): x for c, x in sorted(d.items())} for v, d in sorted(self.per_video_iou.items())},
            "variant": {"include_exception_class": self.include_exception_class, "exception_class": self.exception_class},
            "n_anchors": self.n_anchors,
            "metadata": dict(sorted(self.metadata.items())),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    def per_class_iou(self) -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for vid in sorted(self.per_video_iou):
            for c, x in self.per_video_iou[vid].items():
                out.setdefault(c, []).append(x)
        return dict(sorted(out.items()))

    def render_table(self, title="model") -> str:
        rows = [f"{'Approach':<28}{'%aIoU':>8}{'%mIoU':>8}{'%qIoU':>8}{'%Acc':>8}"]
        rows.append(
            f"{title:<28}{100 * self.aiou:>8.0f}{100 * self.miou:>8.0f}{100 * self.qiou:>8.0f}{100 * self.acc:>8.0f}"
        )
        lines = ["  ".join(f"IoU{c}={100 * float(np.mean(v)):.0f}" for c, v in self.per_class_iou().items())]
        return "\n".join(rows + lines) + "\n"


def build_report(
    tracks: Iterable[PredictionTrack],
    n_classes: int,
    include_exception_class: bool = True,
    exception_class: int | None = None,
    metadata: dict | None = None,
) -> MetricsReport:
    tracks = sorted(_as_tracks(tracks), key=lambda t: t.video_id)
    per_video: dict[str, dict[int, float]] = {}
    for track in tracks:
        row = {}
        for c in range(n_classes):
            if not include_exception_class and c == exception_class:
                continue
            iou = per_class_iou(track, c, n_classes)
            if iou is not None:
                row[c] = iou
        per_video[track.video_id] = row
    pooled = [x for row in per_video.values() for x in row.values()]
    aiou, miou, qiou = aggregate(pooled)
    excluded = None if include_exception_class else exception_class
    meta = {
        "quantile": QUANTILE,
        "quantile_convention": QUANTILE_CONVENTION,
        "aggregation": AGGREGATION,
        "accuracy_pooling": ACCURACY_POOLING,
    }
    meta.update(metadata or {})
    return MetricsReport(
        per_video_iou=per_video,
        aiou=aiou,
        miou=miou,
        qiou=qiou,
        acc=accuracy(tracks, exclude_class=excluded),
        include_exception_class=include_exception_class,
        exception_class=exception_class,
        n_anchors=sum(len(t) for t in tracks),
        metadata=meta,
    )


@torch.no_grad()
def predict_tracks(backbone, decoder, corpus: Corpus, clip_config: ClipConfig, stream_encoder=None,
                   split="test", interval=1.0, batch_size=64) -> list[PredictionTrack]:
    samples = corpus.samples(split, clip_config, interval)
    if not samples:
        raise ValueError(f"split {split!r} yields no clips")
    store = FeatureStore(samples, backbone)
    decoder.eval()
    if stream_encoder is not None:
        stream_encoder.eval()
    preds = np.empty(len(samples), dtype=np.int64)
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        state = store.states(idx)
        if stream_encoder is not None:
            state = stream_encoder(store.streams(idx), state)
        preds[idx] = predict(decoder(state)).numpy()
    tracks = []
    by_video: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_video.setdefault(s.video_id, []).append(i)
    for vid in sorted(by_video):
        ii = by_video[vid]
        tracks.append(PredictionTrack(vid, [samples[i].anchor_time for i in ii], preds[ii], store.labels[ii]))
    return tracks


def evaluate_model(backbone, stream_encoder, decoder, corpus: Corpus, clip_config: ClipConfig,
                   include_exception_class=True, split="test", interval=1.0, metadata=None) -> MetricsReport:
    m = corpus.manifest
    if split not in m.splits or not m.splits[split]:
        raise KeyError(f"manifest has no {split!r} split")
    tracks = predict_tracks(backbone, decoder, corpus, clip_config, stream_encoder, split, interval)
    meta = {"split": split, "with_streams": stream_encoder is not None}
    meta.update(metadata or {})
    return build_report(tracks, m.n_classes, include_exception_class, m.exception_class, meta)
