"""Four-step training recipe.

1. self-supervised finetuning of the backbone (``run_step1``)
2. decoder on frozen video embeddings (``run_step2``)
3. stream encoder through the fixed ("fluid") decoder, plus a state-change
   penalty (``run_step3``)
4. decoder retrained on the frozen encoder's output (``run_step4``)

Schedules: linear warmup then cosine for the learning rate, cosine without
warmup for weight decay. A stretch factor > 1 lengthens the cosine period
while training stops at the nominal end, truncating the tail of the curve.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from ._util import module_hash
from .backbone import JEPABackbone, iter_minibatches, jepa_step, trainable_parameters
from .decoder import AttentiveClassifier, cross_entropy, predict
from .errors import DivergenceError, ShapeError
from .features import FeatureStore
from .stream_encoder import StreamEncoder

logger = logging.getLogger(__name__)

FINETUNE_LR_FACTOR = 1e-2
FINETUNE_WD_FACTOR = 1e-1
DEFAULT_PENALTY_WEIGHT = 1e-3
DEFAULT_BATCH_SIZE = 4


@dataclass(frozen=True)
class ScheduleSpec:
    epochs: int
    samples_per_epoch: int
    lr_start: float
    lr_max: float
    lr_end: float
    wd_start: float
    wd_end: float
    warmup_epochs: int = 1
    stretch: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.samples_per_epoch < 1:
            raise ValueError("epochs and samples_per_epoch must be >= 1")
        if min(self.lr_start, self.lr_max, self.lr_end, self.wd_start, self.wd_end) < 0:
            raise ValueError("learning rates and weight decays must be >= 0")
        if self.stretch < 1.0:
            raise ValueError("stretch factor must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")

    def steps_per_epoch(self, batch_size: int = DEFAULT_BATCH_SIZE) -> int:
        return math.ceil(self.samples_per_epoch / batch_size)

    def total_steps(self, batch_size: int = DEFAULT_BATCH_SIZE) -> int:
        return self.epochs * self.steps_per_epoch(batch_size)


PRESETS = {
    "heico-step2": ScheduleSpec(25, 50_000, 1e-3, 1e-3, 0.0, 1e-2, 1e-6, stretch=1.0),
    "inhouse-step2": ScheduleSpec(25, 1000, 1e-5, 1e-3, 0.0, 1e-2, 1e-2, stretch=1.25),
    "steps34": ScheduleSpec(10, 1000, 1e-6, 1e-4, 0.0, 1e-4, 1e-4, stretch=1.25),
}


def schedule_from(preset: str | None = None, **overrides) -> ScheduleSpec:
    base = PRESETS[preset] if preset else None
    if base is None:
        return ScheduleSpec(**overrides)
    return replace(base, **overrides)


def _check_index(step_index, total_steps):
    if total_steps < 1 or not 0 <= step_index < total_steps:
        raise IndexError(f"step {step_index} outside [0, {total_steps})")


def _cosine(start, end, j, n, stretch):
    # Endpoint convention: progress j / (stretch * (n - 1)), so with stretch 1 the
    # last index lands exactly on `end`; with stretch s it stops at 1/s of the period.
    progress = 0.0 if n <= 1 else j / (stretch * (n - 1))
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * progress))


def warmup_steps(total_steps: int, spec: ScheduleSpec) -> int:
    return int(round(total_steps * spec.warmup_epochs / spec.epochs))


def lr_at(step_index: int, total_steps: int, spec: ScheduleSpec) -> float:
    _check_index(step_index, total_steps)
    w = warmup_steps(total_steps, spec)
    if step_index < w:
        return spec.lr_start + (spec.lr_max - spec.lr_start) * step_index / w
    return _cosine(spec.lr_max, spec.lr_end, step_index - w, total_steps - w, spec.stretch)


def wd_at(step_index: int, total_steps: int, spec: ScheduleSpec) -> float:
    _check_index(step_index, total_steps)
    return _cosine(spec.wd_start, spec.wd_end, step_index, total_steps, spec.stretch)


def finetune_schedule(pretrain: ScheduleSpec) -> ScheduleSpec:
    """Pretraining schedule with learning rates cut 100x and weight decay 10x."""
    return replace(
        pretrain,
        lr_start=pretrain.lr_start * FINETUNE_LR_FACTOR,
        lr_max=pretrain.lr_max * FINETUNE_LR_FACTOR,
        lr_end=pretrain.lr_end * FINETUNE_LR_FACTOR,
        wd_start=pretrain.wd_start * FINETUNE_WD_FACTOR,
        wd_end=pretrain.wd_end * FINETUNE_WD_FACTOR,
    )


# -- losses -----------------------------------------------------------------


@dataclass
class LossReport:
    task: torch.Tensor
    penalty: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"task": float(self.task), "penalty": float(self.penalty), "total": float(self.total)}


def state_change_penalty(s_out: torch.Tensor, s_in: torch.Tensor) -> torch.Tensor:
    if s_out.shape != s_in.shape:
        raise ShapeError(f"state shapes differ: {tuple(s_out.shape)} vs {tuple(s_in.shape)}")
    return ((s_out - s_in) ** 2).mean()


def combined_loss(logits, labels, s_out, s_in, lam: float = DEFAULT_PENALTY_WEIGHT) -> LossReport:
    task = cross_entropy(logits, labels)
    penalty = state_change_penalty(s_out, s_in)
    return LossReport(task, penalty, task + lam * penalty)


# -- sampling ---------------------------------------------------------------


class BalancedSampler:
    """Pick a class uniformly among those present, then a sample uniformly within it."""

    def __init__(self, labels: Sequence[int]):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.classes = np.unique(labels)
        self.members = [np.flatnonzero(labels == c) for c in self.classes]

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        cls = rng.integers(0, len(self.classes), size=batch_size)
        return np.array([self.members[c][rng.integers(0, len(self.members[c]))] for c in cls], dtype=np.int64)


def sample_batch(dataset: Sequence, batch_size: int, rng: np.random.Generator) -> list:
    """Class-balanced draw of ``batch_size`` items; each item must expose ``.label``."""
    sampler = BalancedSampler([s.label for s in dataset])
    return [dataset[i] for i in sampler.sample(batch_size, rng)]


# -- parameter states -------------------------------------------------------


class ParamState(str, enum.Enum):
    FROZEN = "frozen"
    FLUID = "fluid"
    HOT = "hot"


STEP_STATES = {
    1: {"backbone": ParamState.HOT},
    2: {"backbone": ParamState.FROZEN, "decoder": ParamState.HOT},
    3: {"backbone": ParamState.FROZEN, "decoder": ParamState.FLUID, "stream_encoder": ParamState.HOT},
    4: {"backbone": ParamState.FROZEN, "stream_encoder": ParamState.FROZEN, "decoder": ParamState.HOT},
}


@dataclass
class StepPlan:
    step: int
    schedule: ScheduleSpec
    batch_size: int = DEFAULT_BATCH_SIZE
    penalty_weight: float = DEFAULT_PENALTY_WEIGHT
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    states: dict[str, ParamState] = field(default_factory=dict)

    def __post_init__(self):
        if self.step not in STEP_STATES:
            raise ValueError(f"unknown recipe step {self.step}")
        if not self.states:
            self.states = dict(STEP_STATES[self.step])
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["states"] = {k: v.value for k, v in self.states.items()}
        d["betas"] = list(self.betas)
        return d


def apply_states(components: dict[str, nn.Module], states: dict[str, ParamState]) -> None:
    for name, module in components.items():
        state = states.get(name, ParamState.FROZEN)
        # fluid modules keep requires_grad so gradients are computed through and on them
        module.requires_grad_(state is not ParamState.FROZEN)
        module.train(state is ParamState.HOT)


def make_optimizer(module: nn.Module, plan: StepPlan) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for p in module.parameters():
        if p.requires_grad:
            (no_decay if p.ndim <= 1 else decay).append(p)
    groups = [{"params": decay, "apply_wd": True}, {"params": no_decay, "apply_wd": False, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=plan.schedule.lr_start, betas=plan.betas, eps=plan.eps,
                             weight_decay=plan.schedule.wd_start)


def set_hyperparams(opt: torch.optim.Optimizer, lr: float, wd: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr
        if group.get("apply_wd", True):
            group["weight_decay"] = wd


@dataclass
class TrainResult:
    step: int
    log: list[dict]
    hashes_before: dict[str, str]
    hashes_after: dict[str, str]
    optimizer_state: dict | None = None

    @property
    def final_loss(self) -> float:
        return self.log[-1]["loss"] if self.log else float("nan")

    def changed(self) -> dict[str, bool]:
        return {k: self.hashes_before[k] != self.hashes_after[k] for k in self.hashes_before}


def _hashes(components):
    return {k: module_hash(m) for k, m in components.items()}


def _train(
    plan: StepPlan,
    components: dict[str, nn.Module],
    hot: nn.Module,
    store: FeatureStore,
    loss_fn: Callable[[np.ndarray], tuple[torch.Tensor, dict]],
    log_sink: Callable[[dict], None] | None,
) -> TrainResult:
    before = _hashes(components)
    apply_states(components, plan.states)
    opt = make_optimizer(hot, plan)
    sampler = BalancedSampler(store.labels)
    rng = np.random.default_rng([plan.seed, plan.step])
    torch.manual_seed(plan.seed * 1009 + plan.step)
    spec = plan.schedule
    total = spec.total_steps(plan.batch_size)
    per_epoch = spec.steps_per_epoch(plan.batch_size)
    log = []
    for i in range(total):
        lr, wd = lr_at(i, total, spec), wd_at(i, total, spec)
        set_hyperparams(opt, lr, wd)
        idx = sampler.sample(plan.batch_size, rng)
        loss, parts = loss_fn(idx)
        if not torch.isfinite(loss):
            raise DivergenceError(f"recipe step {plan.step}", i, float(loss.detach()))
        opt.zero_grad(set_to_none=True)
        for m in components.values():
            m.zero_grad(set_to_none=True)
        loss.backward()
        try:
            opt.step()
        except RuntimeError as exc:  # AdamW raises on float overflow of the step size
            raise DivergenceError(f"recipe step {plan.step}", i, float("inf"), what="optimizer update") from exc
        rec = {"recipe_step": plan.step, "step": i, "epoch": i // per_epoch, "loss": float(loss.detach()), "lr": lr, "wd": wd}
        rec.update(parts)
        log.append(rec)
        if log_sink is not None:
            log_sink(rec)
    for m in components.values():
        m.zero_grad(set_to_none=True)
        m.requires_grad_(False)
        m.eval()
    after = _hashes(components)
    logger.info("step %d done: %d updates, final loss %.4f", plan.step, total, log[-1]["loss"] if log else float("nan"))
    return TrainResult(plan.step, log, before, after, opt.state_dict())


def run_step2(store: FeatureStore, backbone: JEPABackbone, decoder: AttentiveClassifier, plan: StepPlan,
              log_sink=None) -> TrainResult:
    """Train the decoder on frozen video embeddings."""
    components = {"backbone": backbone, "decoder": decoder}

    def loss_fn(idx):
        logits = decoder(store.states(idx))
        loss = cross_entropy(logits, store.targets(idx))
        return loss, {"task": float(loss.detach()), "penalty": 0.0}

    return _train(plan, components, decoder, store, loss_fn, log_sink)


def run_step3(store: FeatureStore, backbone: JEPABackbone, decoder: AttentiveClassifier, encoder: StreamEncoder,
              plan: StepPlan, log_sink=None) -> TrainResult:
    """Train the stream encoder through the fixed decoder with a state-change penalty."""
    components = {"backbone": backbone, "decoder": decoder, "stream_encoder": encoder}

    def loss_fn(idx):
        s_in = store.states(idx)
        s_out = encoder(store.streams(idx), s_in)
        rep = combined_loss(decoder(s_out), store.targets(idx), s_out, s_in, plan.penalty_weight)
        return rep.total, {"task": float(rep.task.detach()), "penalty": float(rep.penalty.detach())}

    return _train(plan, components, encoder, store, loss_fn, log_sink)


def run_step4(store: FeatureStore, backbone: JEPABackbone, encoder: StreamEncoder, decoder: AttentiveClassifier,
              plan: StepPlan, log_sink=None) -> TrainResult:
    """Retrain the decoder on the frozen stream encoder's output."""
    components = {"backbone": backbone, "stream_encoder": encoder, "decoder": decoder}

    def loss_fn(idx):
        with torch.no_grad():
            state = encoder(store.streams(idx), store.states(idx))
        loss = cross_entropy(decoder(state), store.targets(idx))
        return loss, {"task": float(loss.detach()), "penalty": 0.0}

    return _train(plan, components, decoder, store, loss_fn, log_sink)


def run_step1(clips: np.ndarray, backbone: JEPABackbone, schedule: ScheduleSpec, batch_size: int = DEFAULT_BATCH_SIZE,
              mask_ratio: float = 0.75, momentum: float = 0.998, seed: int = 0, log_sink=None) -> TrainResult:
    """Self-supervised finetuning on unlabeled ``(N, T, H, W, C)`` clips.

    ``schedule`` is used as given; pass it through :func:`finetune_schedule`
    to derive finetuning rates from pretraining ones.
    """
    clips = np.asarray(clips)
    if len(clips) == 0:
        raise ValueError("no clips to finetune on")
    plan = StepPlan(1, schedule, batch_size=batch_size, seed=seed)
    before = {"teacher": module_hash(backbone.teacher)}
    rng = np.random.default_rng([seed, 1])
    torch.manual_seed(seed * 1009 + 1)
    backbone.set_finetune_mode()
    params = trainable_parameters(backbone)
    decay = [p for p in params if p.ndim > 1]
    no_decay = [p for p in params if p.ndim <= 1]
    opt = torch.optim.AdamW(
        [{"params": decay, "apply_wd": True}, {"params": no_decay, "apply_wd": False, "weight_decay": 0.0}],
        lr=schedule.lr_start, betas=plan.betas, eps=plan.eps, weight_decay=schedule.wd_start,
    )
    total = schedule.total_steps(batch_size)
    per_epoch = schedule.steps_per_epoch(batch_size)
    log, i = [], 0
    pool = iter(())
    while i < total:
        batch = next(pool, None)
        if batch is None:
            pool = iter_minibatches(len(clips), batch_size, rng)
            continue
        lr, wd = lr_at(i, total, schedule), wd_at(i, total, schedule)
        set_hyperparams(opt, lr, wd)
        loss = jepa_step(backbone, torch.as_tensor(clips[batch]), opt, rng, mask_ratio, momentum, step=i)
        rec = {"recipe_step": 1, "step": i, "epoch": i // per_epoch, "loss": loss, "lr": lr, "wd": wd}
        log.append(rec)
        if log_sink is not None:
            log_sink(rec)
        i += 1
    backbone.requires_grad_(False)
    backbone.eval()
    return TrainResult(1, log, before, {"teacher": module_hash(backbone.teacher)}, opt.state_dict())


def epoch_means(log: Sequence[dict], key: str = "loss") -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for rec in log:
        by_epoch.setdefault(rec["epoch"], []).append(rec[key])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


@torch.no_grad()
def training_accuracy(store: FeatureStore, decoder, encoder=None, batch_size=64) -> float:
    decoder.eval()
    correct = 0
    for start in range(0, len(store), batch_size):
        idx = np.arange(start, min(start + batch_size, len(store)))
        state = store.states(idx)
        if encoder is not None:
            encoder.eval()
            state = encoder(store.streams(idx), state)
        correct += int((predict(decoder(state)) == store.targets(idx)).sum())
    return correct / len(store)
