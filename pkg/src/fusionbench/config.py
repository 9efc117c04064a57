"""Run configuration (JSON) with recipe presets baked in.

Relative paths resolve against the config file's directory. The config
hash identifies *what is computed*: it replaces referenced files by the
hash of their contents and leaves out ``output_dir``, so moving a run or its
data does not change it while editing any hyperparameter does.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import jsonschema

from ._util import json_hash
from .backbone import TubeletSpec
from .datapipe import ClipConfig
from .errors import SchemaError
from .recipe import PRESETS, ScheduleSpec, StepPlan

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "run",
    "data": {"manifest": None, "clip_frames": 16, "frame_step": 1, "train_interval": 1.0, "eval_interval": 1.0},
    "backbone": {
        "provider": "stub",
        "checkpoint": None,
        "temporal_width": 2,
        "spatial_size": 16,
        "embed_dim": 64,
        "channels": 3,
        "depth": 2,
        "heads": 4,
        "mlp_ratio": 2.0,
    },
    "finetune": {
        "preset": None,
        "schedule": {"epochs": 3, "samples_per_epoch": 64, "lr_start": 1e-4, "lr_max": 1e-3, "lr_end": 1e-5,
                     "wd_start": 0.04, "wd_end": 0.4, "warmup_epochs": 1, "stretch": 1.25},
        "reduce_from_pretraining": False,
        "batch_size": 4,
        "mask_ratio": 0.75,
        "momentum": 0.998,
        "splits": ["train", "val"],
    },
    "stream_encoder": {"depth": 4, "heads": 4, "dropout": 0.2, "mlp_ratio": 4.0, "stride": 1},
    "decoder": {"heads": 4, "n_queries": 1, "mlp_ratio": 4.0},
    "steps": {},
    "penalty_weight": 1e-3,
    "adamw": {"betas": [0.9, 0.999], "eps": 1e-8},
}

DEFAULT_STEP_PRESET = {"phase": "heico-step2", "binary-los": "inhouse-step2", "binary-cci": "inhouse-step2",
                       "synthetic": "inhouse-step2"}

_SCHEDULE_KEYS = {f.name for f in fields(ScheduleSpec)}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "data": {"type": "object", "additionalProperties": False,
                 "properties": {"manifest": {"type": ["string", "null"]},
                                "clip_frames": {"type": "integer", "minimum": 1},
                                "frame_step": {"type": "integer", "minimum": 1},
                                "train_interval": {"type": "number", "exclusiveMinimum": 0},
                                "eval_interval": {"type": "number", "exclusiveMinimum": 0}}},
        "backbone": {"type": "object", "additionalProperties": False,
                     "properties": {"provider": {"type": "string"},
                                    "checkpoint": {"type": ["string", "null"]},
                                    "temporal_width": {"type": "integer", "minimum": 1},
                                    "spatial_size": {"type": "integer", "minimum": 1},
                                    "embed_dim": {"type": "integer", "minimum": 1},
                                    "channels": {"type": "integer", "minimum": 1},
                                    "depth": {"type": "integer", "minimum": 0},
                                    "heads": {"type": "integer", "minimum": 1},
                                    "mlp_ratio": {"type": "number", "exclusiveMinimum": 0}}},
        "finetune": {"type": "object", "additionalProperties": False,
                     "properties": {"preset": {"type": ["string", "null"]},
                                    "schedule": {"type": "object"},
                                    "reduce_from_pretraining": {"type": "boolean"},
                                    "batch_size": {"type": "integer", "minimum": 1},
                                    "mask_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                                    "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                                    "splits": {"type": "array", "items": {"enum": ["train", "val", "test"]}}}},
        "stream_encoder": {"type": "object", "additionalProperties": False,
                           "properties": {"depth": {"type": "integer", "minimum": 1},
                                          "heads": {"type": "integer", "minimum": 1},
                                          "dropout": {"type": "number", "minimum": 0, "maximum": 1},
                                          "mlp_ratio": {"type": "number", "exclusiveMinimum": 0},
                                          "stride": {"type": "integer", "minimum": 1}}},
        "decoder": {"type": "object", "additionalProperties": False,
                    "properties": {"heads": {"type": "integer", "minimum": 1},
                                   "n_queries": {"type": "integer", "minimum": 1},
                                   "mlp_ratio": {"type": "number", "exclusiveMinimum": 0}}},
        "steps": {"type": "object", "additionalProperties": False,
                  "patternProperties": {"^[234]$": {
                      "type": "object", "additionalProperties": False,
                      "properties": {"preset": {"enum": sorted(PRESETS)},
                                     "schedule": {"type": "object"},
                                     "batch_size": {"type": "integer", "minimum": 1}}}}},
        "penalty_weight": {"type": "number", "minimum": 0},
        "adamw": {"type": "object", "additionalProperties": False,
                  "properties": {"betas": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                                 "eps": {"type": "number", "exclusiveMinimum": 0}}},
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("steps", "schedule"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _schedule(preset: str | None, overrides: dict, where: str) -> ScheduleSpec:
    unknown = set(overrides) - _SCHEDULE_KEYS
    if unknown:
        raise SchemaError(f"unknown schedule fields {sorted(unknown)}", field=where)
    try:
        if preset:
            return replace(PRESETS[preset], **overrides)
        return ScheduleSpec(**overrides)
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc), field=where) from exc


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "RunConfig":
        errors = sorted(jsonschema.Draft7Validator(CONFIG_SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
        if errors:
            err = errors[0]
            raise SchemaError(err.message, field="/".join(str(p) for p in err.path) or "<root>")
        cfg = cls(_merge(DEFAULTS, doc), Path(base_dir) if base_dir else Path.cwd())
        cfg.tubelet  # validate eagerly
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise SchemaError(f"config file not found: {path}", field="config")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", field="config") from exc
        return cls.from_dict(doc, path.parent)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else (self.base_dir / path)

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.raw["output_dir"])

    @property
    def manifest_path(self) -> Path:
        p = self.resolve(self.raw["data"]["manifest"])
        if p is None:
            raise SchemaError("no dataset manifest configured", field="data/manifest")
        if not p.is_file():
            raise SchemaError(f"manifest not found: {p}", field="data/manifest")
        return p

    @property
    def clip(self) -> ClipConfig:
        d = self.raw["data"]
        return ClipConfig(d["clip_frames"], d["frame_step"])

    @property
    def tubelet(self) -> TubeletSpec:
        b = self.raw["backbone"]
        try:
            return TubeletSpec(b["temporal_width"], b["spatial_size"], b["embed_dim"])
        except ValueError as exc:
            raise SchemaError(str(exc), field="backbone") from exc

    def step_plan(self, step: int, task: str) -> StepPlan:
        entry = self.raw["steps"].get(str(step), {})
        default = DEFAULT_STEP_PRESET.get(task, "inhouse-step2") if step == 2 else "steps34"
        preset = entry.get("preset", default if "schedule" not in entry else None)
        sched = _schedule(preset, entry.get("schedule", {}), f"steps/{step}/schedule")
        aw = self.raw["adamw"]
        return StepPlan(step, sched, batch_size=entry.get("batch_size", 4), penalty_weight=self.raw["penalty_weight"],
                        betas=tuple(aw["betas"]), eps=aw["eps"], seed=self.seed)

    def finetune_schedule(self) -> ScheduleSpec:
        from .recipe import finetune_schedule

        f = self.raw["finetune"]
        sched = _schedule(f["preset"], f["schedule"], "finetune/schedule")
        return finetune_schedule(sched) if f["reduce_from_pretraining"] else sched

    def hash(self) -> str:
        doc = copy.deepcopy(self.raw)
        doc.pop("output_dir", None)
        manifest = self.resolve(doc["data"]["manifest"])
        if manifest is not None and manifest.is_file():
            doc["data"]["manifest"] = "sha256:" + file_sha256(manifest)
        ckpt = self.resolve(doc["backbone"]["checkpoint"])
        if ckpt is not None and ckpt.is_file():
            doc["backbone"]["checkpoint"] = "sha256:" + file_sha256(ckpt)
        return json_hash(doc)
