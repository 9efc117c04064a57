from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .datapipe import Corpus  # noqa: E402


def _save(fig, path: Path, description: str) -> Path:
    # fixed metadata keeps PNG bytes reproducible across runs
    fig.savefig(path, dpi=100, metadata={"Software": None, "Description": description})
    plt.close(fig)
    return path


def plot_composition(corpus: Corpus, out_dir, tag: str = "") -> list[Path]:
    """One figure per split: video lengths (sorted) and hours per class."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for split, ids in sorted(corpus.manifest.splits.items()):
        if not ids:
            continue
        entries = sorted((corpus.entry(v) for v in ids), key=lambda e: e.duration)
        fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 5))
        top.bar(range(len(entries)), [e.duration / 3600.0 for e in entries], color="0.4")
        top.set_ylabel("hours")
        top.set_title(f"{split}: {len(entries)} videos")
        top.set_xticks([])
        if corpus.manifest.task != "unlabeled":
            hours = Counter()
            for e in entries:
                for c, n in Counter(corpus.labels(e.id).tolist()).items():
                    hours[c] += n / e.fps / 3600.0
            classes = sorted(hours)
            bottom.bar([str(c) for c in classes], [hours[c] for c in classes], color="tab:blue")
            bottom.set_xlabel("class")
            bottom.set_ylabel("hours")
        else:
            bottom.axis("off")
        fig.tight_layout()
        paths.append(_save(fig, out_dir / f"composition_{split}.png", tag))
    return paths


def read_log(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def plot_training_log(records: list[dict], out_dir, tag: str = "") -> list[Path]:
    if not records:
        raise ValueError("training log is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_step: dict[int, list[dict]] = {}
    for r in records:
        by_step.setdefault(r.get("recipe_step", 0), []).append(r)
    fig, axes = plt.subplots(2, 1, figsize=(6, 5), sharex=False)
    for step, recs in sorted(by_step.items()):
        xs = [r["step"] for r in recs]
        axes[0].plot(xs, [r["loss"] for r in recs], label=f"step {step}", lw=0.8)
        axes[1].plot(xs, [r["lr"] for r in recs], label=f"step {step}", lw=0.8)
    axes[0].set_ylabel("loss")
    axes[1].set_ylabel("learning rate")
    axes[1].set_xlabel("optimizer step")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    return [_save(fig, out_dir / "training_curves.png", tag)]
