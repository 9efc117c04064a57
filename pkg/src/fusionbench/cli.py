"""Command-line entry point: ``fusionbench {synth,finetune,train,evaluate,plot}``.

Exit codes: 0 success, 2 config/schema error, 3 missing prerequisite,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from ._util import deterministic_mode, enable_determinism
from .backbone import JEPABackbone, build_backbone
from .config import RunConfig, file_sha256
from .datapipe import Corpus, SyntheticSpec, make_synthetic_dataset, sample_class_frequencies
from .decoder import AttentiveClassifier
from .errors import FusionBenchError, PrerequisiteError, SchemaError
from .evaluation import evaluate_model
from .features import FeatureStore
from .plotting import plot_composition, plot_training_log, read_log
from .recipe import epoch_means, run_step1, run_step2, run_step3, run_step4
from .stream_encoder import StreamEncoder, StreamTokenizerSpec

logger = logging.getLogger("fusionbench")


class JsonlLog:
    def __init__(self, path: Path, config_hash: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w", encoding="utf-8")
        self.config_hash = config_hash

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps({**record, "config_hash": self.config_hash}, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.raw["seed"] = args.seed
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _backbone(cfg: RunConfig) -> JEPABackbone:
    b = cfg.raw["backbone"]
    path = cfg.resolve(b["checkpoint"])
    if path is not None:
        if not path.is_file():
            raise PrerequisiteError(f"backbone checkpoint not found: {path}")
        payload = ckpt.load_checkpoint(path)
        if "backbone" not in payload["components"]:
            raise SchemaError("checkpoint holds no backbone", field="backbone/checkpoint")
        return ckpt.restore_backbone(payload["components"]["backbone"])
    try:
        return build_backbone(b["provider"], spec=cfg.tubelet, channels=b["channels"], depth=b["depth"],
                              heads=b["heads"], mlp_ratio=b["mlp_ratio"], seed=cfg.seed)
    except ValueError as exc:
        raise SchemaError(str(exc), field="backbone") from exc


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec(n_videos=args.n_videos, duration=args.duration, fps=args.fps, height=args.size,
                             width=args.size, n_channels=args.channels, label_source=args.label_source,
                             n_classes=args.classes, segment_seconds=args.segment_seconds,
                             split_counts=tuple(args.splits), blue_segments=args.blue_segments)
    except ValueError as exc:
        raise SchemaError(str(exc), field="synth") from exc
    corpus = make_synthetic_dataset(args.seed, spec)
    path = corpus.write(args.out)
    print(f"wrote {path}")
    for split, ids in corpus.manifest.splits.items():
        labels = np.concatenate([corpus.labels(v) for v in ids]) if ids else np.empty(0)
        freqs = {c: round(f, 4) for c, f in sample_class_frequencies(labels).items()} if ids else {}
        print(f"  {split:<5} videos={len(ids):<3} frames={labels.size:<6} class_freq={freqs}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    corpus = Corpus.load(cfg.manifest_path)
    out = _out_dir(args, cfg)
    chash = cfg.hash()
    f = cfg.raw["finetune"]
    backbone = _backbone(cfg)
    samples = [s for split in f["splits"] if corpus.manifest.splits.get(split)
               for s in corpus.samples(split, cfg.clip, cfg.raw["data"]["train_interval"])]
    if not samples:
        raise SchemaError("finetuning splits contain no clips", field="finetune/splits")
    clips = np.stack([s.clip.frames for s in samples])
    log = JsonlLog(out / "finetune_log.jsonl", chash)
    try:
        result = run_step1(clips, backbone, cfg.finetune_schedule(), f["batch_size"], f["mask_ratio"],
                           f["momentum"], seed=cfg.seed, log_sink=log)
    finally:
        log.close()
    meta = ckpt.save_checkpoint(out / "backbone.pt", "backbone", {"backbone": backbone}, chash, step=1,
                                optimizer_state=result.optimizer_state, rng_state=ckpt.rng_snapshot())
    means = ", ".join(f"{m:.4f}" for m in epoch_means(result.log))
    print(f"finetuned on {len(clips)} clips; epoch mean L1: {means}")
    print(f"wrote {out / 'backbone.pt'} content_hash={meta['content_hash']}")
    return 0


def _stream_encoder(cfg: RunConfig, corpus: Corpus) -> StreamEncoder:
    if not corpus.has_streams():
        raise SchemaError("step 3 needs stream data for every video", field="data/manifest")
    first = corpus.manifest.splits["train"][0]
    e = cfg.raw["stream_encoder"]
    spec = StreamTokenizerSpec(cfg.tubelet.temporal_width, e["stride"], cfg.tubelet.embed_dim)
    return StreamEncoder(corpus.streams(first).n_channels, spec, heads=e["heads"], depth=e["depth"],
                         dropout=e["dropout"], mlp_ratio=e["mlp_ratio"], seed=cfg.seed + 2)


def _prerequisite(out: Path, step: int, chash: str) -> dict:
    path = out / f"step{step}.pt"
    if not path.is_file():
        raise PrerequisiteError(f"step {step + 1} requires the step-{step} checkpoint {path}")
    payload = ckpt.load_checkpoint(path)
    if payload["meta"]["config_hash"] != chash:
        raise PrerequisiteError(f"{path} was produced under a different config (hash mismatch)")
    return ckpt.restore_components(payload)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    try:
        steps = sorted({int(s) for s in args.steps.split(",") if s.strip()})
    except ValueError as exc:
        raise SchemaError(f"bad --steps {args.steps!r}", field="steps") from exc
    if not steps or not set(steps) <= {2, 3, 4}:
        raise SchemaError("--steps must be a subset of 2,3,4", field="steps")
    corpus = Corpus.load(cfg.manifest_path)
    if corpus.manifest.task == "unlabeled":
        raise SchemaError("training steps 2-4 need a labelled manifest", field="data/manifest")
    out = _out_dir(args, cfg)
    chash = cfg.hash()
    backbone = _backbone(cfg)
    backbone.requires_grad_(False)
    store = FeatureStore(corpus.samples("train", cfg.clip, cfg.raw["data"]["train_interval"]), backbone)
    d = cfg.raw["decoder"]
    decoder = encoder = None
    for step in steps:
        if step == 3 and decoder is None:
            decoder = _prerequisite(out, 2, chash)["decoder"]
        if step == 4 and encoder is None:
            comps = _prerequisite(out, 3, chash)
            decoder, encoder = comps["decoder"], comps["stream_encoder"]
        plan = cfg.step_plan(step, corpus.manifest.task)
        log = JsonlLog(out / f"step{step}_log.jsonl", chash)
        try:
            if step == 2:
                decoder = AttentiveClassifier(cfg.tubelet.embed_dim, corpus.manifest.n_classes, heads=d["heads"],
                                              n_queries=d["n_queries"], mlp_ratio=d["mlp_ratio"], seed=cfg.seed + 1)
                result = run_step2(store, backbone, decoder, plan, log)
            elif step == 3:
                encoder = _stream_encoder(cfg, corpus)
                result = run_step3(store, backbone, decoder, encoder, plan, log)
            else:
                result = run_step4(store, backbone, encoder, decoder, plan, log)
        finally:
            log.close()
        components = {"backbone": backbone, "decoder": decoder}
        if step >= 3:
            components["stream_encoder"] = encoder
        meta = ckpt.save_checkpoint(out / f"step{step}.pt", f"step{step}", components, chash, step=step,
                                    optimizer_state=result.optimizer_state, rng_state=ckpt.rng_snapshot(),
                                    extra={"plan": plan.to_json(), "hashes_before": result.hashes_before,
                                           "hashes_after": result.hashes_after})
        print(f"step {step}: {len(result.log)} updates, final loss {result.final_loss:.4f}, "
              f"changed={result.changed()} -> {out / f'step{step}.pt'} ({meta['content_hash'][:12]})")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    path = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / ("step4.pt" if args.with_streams else "step2.pt")
    if not path.is_file():
        raise PrerequisiteError(f"checkpoint not found: {path}")
    payload = ckpt.load_checkpoint(path)
    chash = cfg.hash()
    if payload["meta"]["config_hash"] != chash:
        if not args.allow_config_mismatch:
            raise SchemaError("checkpoint was produced under a different config; pass --allow-config-mismatch "
                              "to evaluate anyway", field="checkpoint")
        logger.warning("config hash mismatch between %s and the current config", path)
    comps = ckpt.restore_components(payload)
    if args.with_streams and "stream_encoder" not in comps:
        raise SchemaError(f"{path} is a video-only checkpoint; it has no stream encoder", field="--with-streams")
    corpus = Corpus.load(cfg.manifest_path)
    report = evaluate_model(
        comps["backbone"], comps.get("stream_encoder") if args.with_streams else None, comps["decoder"], corpus,
        cfg.clip, include_exception_class=args.include_class13, split=args.split,
        interval=cfg.raw["data"]["eval_interval"],
        metadata={"checkpoint_hash": payload["meta"]["content_hash"], "checkpoint_kind": payload["meta"]["kind"],
                  "config_hash": chash},
    )
    stem = f"report_{path.stem}_{'streams' if args.with_streams else 'video'}_{'incl' if args.include_class13 else 'excl'}"
    report.write(out / f"{stem}.json")
    table = report.render_table(path.stem + (" (video+streams)" if args.with_streams else " (video-only)"))
    (out / f"{stem}.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"wrote {out / (stem + '.json')}")
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out)
    if args.manifest:
        corpus = Corpus.load(args.manifest)
        paths = plot_composition(corpus, out, tag=f"manifest_sha256={file_sha256(Path(args.manifest))}")
    else:
        records = read_log(args.log)
        if not records:
            raise SchemaError("training log is empty", field=str(args.log))
        paths = plot_training_log(records, out, tag=f"config_hash={records[0].get('config_hash', '')}")
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-videos", type=int, default=12)
    p.add_argument("--splits", type=int, nargs=3, default=[6, 2, 4], metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--fps", type=float, default=2.0)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--segment-seconds", type=float, default=10.0)
    p.add_argument("--label-source", choices=["video", "streams", "both"], default="streams")
    p.add_argument("--blue-segments", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("finetune", help="self-supervised backbone finetuning (recipe step 1)")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("train", help="run recipe steps 2-4")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", default="2,3,4")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="dense-clip evaluation of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--include-class13", action="store_true")
    p.add_argument("--with-streams", action="store_true")
    p.add_argument("--split", default="test")
    p.add_argument("--allow-config-mismatch", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="dataset composition or training curves")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if deterministic_mode():
        enable_determinism()
    try:
        return args.func(args)
    except FusionBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
