"""Checkpoint container.

A checkpoint is a ``torch.save`` dict with only tensors and plain Python
values, so it loads with ``weights_only=True``::

    {"format": "fusionbench-checkpoint/1",
     "meta": {"kind", "step", "config_hash", "content_hash", ...},
     "components": {name: {"config": {...}, "arrays": state_dict}},
     "optimizer_state": ..., "rng_state": ...}

``content_hash`` covers every component's arrays and configs; it is what
determinism checks compare, not the file bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from ._util import json_hash, tensor_hash
from .backbone import JEPABackbone
from .decoder import AttentiveClassifier
from .errors import SchemaError
from .stream_encoder import StreamEncoder

FORMAT = "fusionbench-checkpoint/1"


def component_record(name: str, module) -> dict:
    if isinstance(module, JEPABackbone):
        config = module.checkpoint_meta()
    elif isinstance(module, StreamEncoder):
        config = {"encoder": dict(module.config), "sharing": module.fusion.sharing_metadata()}
    elif isinstance(module, AttentiveClassifier):
        config = dict(module.config)
    else:
        raise TypeError(f"cannot checkpoint component {name!r} of type {type(module).__name__}")
    arrays = {k: v.detach().clone() for k, v in module.state_dict().items()}
    return {"config": config, "arrays": arrays}


def content_hash(components: dict) -> str:
    parts = {name: {"config": json_hash(rec["config"]), "arrays": tensor_hash(rec["arrays"])}
             for name, rec in components.items()}
    return json_hash(parts)


def rng_snapshot(rng: np.random.Generator | None = None) -> dict:
    snap = {"torch": torch.get_rng_state()}
    if rng is not None:
        snap["numpy"] = rng.bit_generator.state
    return snap


def save_checkpoint(path, kind: str, components: dict, config_hash: str, step: int | None = None,
                    optimizer_state=None, rng_state=None, extra: dict | None = None) -> dict:
    records = {name: component_record(name, m) for name, m in components.items()}
    meta = {"kind": kind, "step": step, "config_hash": config_hash, "content_hash": content_hash(records)}
    meta.update(extra or {})
    payload = {"format": FORMAT, "meta": meta, "components": records,
               "optimizer_state": optimizer_state, "rng_state": rng_state}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return meta


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise SchemaError(f"unreadable checkpoint: {exc}", field=str(path)) from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise SchemaError("not a fusionbench checkpoint", field=str(path))
    return payload


def restore_backbone(record: dict) -> JEPABackbone:
    bb = JEPABackbone.from_meta(record["config"])
    bb.load_state_dict(record["arrays"])
    bb.requires_grad_(False)
    return bb.eval()


def restore_stream_encoder(record: dict) -> StreamEncoder:
    enc = StreamEncoder.from_config(record["config"]["encoder"])
    enc.load_state_dict(record["arrays"])
    enc.requires_grad_(False)
    return enc.eval()


def restore_decoder(record: dict) -> AttentiveClassifier:
    dec = AttentiveClassifier.from_config(record["config"])
    dec.load_state_dict(record["arrays"])
    dec.requires_grad_(False)
    return dec.eval()


RESTORERS = {"backbone": restore_backbone, "stream_encoder": restore_stream_encoder, "decoder": restore_decoder}


def restore_components(payload: dict) -> dict:
    return {name: RESTORERS[name](rec) for name, rec in payload["components"].items()}
