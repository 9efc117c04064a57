"""Frozen video backbone that supplies the initial state vector.

The stub provider is a seed-deterministic linear tubelet projection with
fixed sin/cos spatiotemporal positions, optionally followed by a small
pre-norm transformer stack. Only the stack (and the predictor) is trainable,
and only during self-supervised finetuning via :func:`jepa_step`. Once that is
done the EMA teacher is what :meth:`JEPABackbone.encode` uses.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from ._attention import multihead_attention
from ._util import seeded, sincos_3d
from .errors import DivergenceError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, C) in [0, 1]
    fps: float
    anchor_time: float = 0.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or min(self.frames.shape) <= 0:
            raise ShapeError(f"clip frames must be (T, H, W, C) with positive sizes, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("clip frames contain non-finite values")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("clip frames must lie in [0, 1]")
        if self.fps <= 0:
            raise ValueError("fps must be positive")


@dataclass(frozen=True)
class TubeletSpec:
    temporal_width: int = 2
    spatial_size: int = 16
    embed_dim: int = 64

    def __post_init__(self):
        if self.temporal_width < 1 or self.spatial_size < 1 or self.embed_dim < 1:
            raise ValueError(f"invalid tubelet spec {self}")

    def grid(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        wt, sp = self.temporal_width, self.spatial_size
        if t % wt or h % sp or w % sp:
            raise ShapeError(
                f"clip (T={t}, H={h}, W={w}) not divisible by tubelet "
                f"(w_t={wt}, spatial={sp})"
            )
        return t // wt, h // sp, w // sp


@dataclass
class TokenizedVideo:
    tokens: np.ndarray  # (n_v, d_raw)
    positions: np.ndarray  # (n_v, 3) integer (time, row, col)


@dataclass
class TokenMask:
    masked_indices: np.ndarray
    n_tokens: int
    ratio: float = field(default=0.0)

    def __post_init__(self):
        idx = np.asarray(self.masked_indices, dtype=np.int64)
        if idx.size == 0 or idx.size >= self.n_tokens:
            raise ValueError(f"mask must hide between 1 and {self.n_tokens - 1} tokens, got {idx.size}")
        if idx.min() < 0 or idx.max() >= self.n_tokens or np.unique(idx).size != idx.size:
            raise ValueError("mask indices must be unique and in range")
        self.masked_indices = np.sort(idx)

    @property
    def kept_indices(self) -> np.ndarray:
        keep = np.ones(self.n_tokens, dtype=bool)
        keep[self.masked_indices] = False
        return np.flatnonzero(keep)


def grid_positions(nt: int, nh: int, nw: int) -> np.ndarray:
    t, r, c = np.meshgrid(np.arange(nt), np.arange(nh), np.arange(nw), indexing="ij")
    return np.stack([t.ravel(), r.ravel(), c.ravel()], axis=1)


def patchify(frames: torch.Tensor, spec: TubeletSpec) -> torch.Tensor:
    """(..., T, H, W, C) -> (..., n_v, w_t*s*s*C), tokens ordered time-major."""
    *lead, t, h, w, c = frames.shape
    nt, nh, nw = spec.grid(t, h, w)
    wt, sp = spec.temporal_width, spec.spatial_size
    x = frames.reshape(*lead, nt, wt, nh, sp, nw, sp, c)
    k = len(lead)
    perm = list(range(k)) + [k + i for i in (0, 2, 4, 1, 3, 5, 6)]
    return x.permute(*perm).reshape(*lead, nt * nh * nw, wt * sp * sp * c)


def tokenize_video(clip: VideoClip, spec: TubeletSpec) -> TokenizedVideo:
    t, h, w, _ = clip.frames.shape
    grid = spec.grid(t, h, w)
    tokens = patchify(torch.from_numpy(np.ascontiguousarray(clip.frames)), spec).numpy()
    return TokenizedVideo(tokens=tokens, positions=grid_positions(*grid))


def sample_mask(n_v: int, ratio: float, rng: np.random.Generator) -> TokenMask:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    if n_v < 2:
        raise ValueError("need at least two tokens to mask")
    count = int(min(max(round(ratio * n_v), 1), n_v - 1))
    idx = rng.choice(n_v, size=count, replace=False)
    return TokenMask(masked_indices=idx, n_tokens=n_v, ratio=ratio)


class Block(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim, heads, mlp_ratio=2.0):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        x = x + self.proj(multihead_attention(q, k, v, self.heads))
        return x + self.mlp(self.norm2(x))


class StubEncoder(nn.Module):
    def __init__(self, spec: TubeletSpec, channels=3, depth=2, heads=4, mlp_ratio=2.0):
        super().__init__()
        self.spec = spec
        d = spec.embed_dim
        d_raw = spec.temporal_width * spec.spatial_size**2 * channels
        self.proj = nn.Linear(d_raw, d)
        nn.init.zeros_(self.proj.bias)
        self.proj.requires_grad_(False)
        self.blocks = nn.ModuleList(Block(d, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(d) if depth > 0 else nn.Identity()

    def position_encoding(self, positions: np.ndarray) -> torch.Tensor:
        pe = sincos_3d(positions, self.spec.embed_dim)
        return torch.as_tensor(pe, dtype=self.proj.weight.dtype)

    def forward(self, patches, positions, keep=None):
        x = self.proj(patches) + self.position_encoding(positions)
        if keep is not None:
            x = x[..., torch.as_tensor(keep), :]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Predictor(nn.Module):
    """Two-layer perceptron mapping (pooled context, mask-position code) to a token embedding."""

    def __init__(self, dim, hidden=None):
        super().__init__()
        hidden = hidden or 2 * dim
        self.mask_token = nn.Parameter(0.02 * torch.randn(dim))
        self.mlp = nn.Sequential(nn.Linear(2 * dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, context, target_pos):
        # context (B, n_keep, d); target_pos (n_mask, d)
        ctx = context.mean(dim=-2, keepdim=True).expand(*context.shape[:-2], target_pos.shape[0], -1)
        z = (self.mask_token + target_pos).expand_as(ctx)
        return self.mlp(torch.cat([ctx, z], dim=-1))


BACKBONE_PROVIDERS: dict[str, Callable[..., "JEPABackbone"]] = {}


def register_backbone(name: str):
    def deco(factory):
        BACKBONE_PROVIDERS[name] = factory
        return factory

    return deco


def build_backbone(provider: str, **kwargs) -> "JEPABackbone":
    try:
        factory = BACKBONE_PROVIDERS[provider]
    except KeyError:
        raise ValueError(f"unknown backbone provider {provider!r}; known: {sorted(BACKBONE_PROVIDERS)}") from None
    return factory(**kwargs)


@register_backbone("stub")
class JEPABackbone(nn.Module):
    """Student, EMA teacher and discardable predictor for one tubelet geometry."""

    provider = "stub"

    def __init__(
        self,
        spec: TubeletSpec = TubeletSpec(),
        channels: int = 3,
        depth: int = 2,
        heads: int = 4,
        mlp_ratio: float = 2.0,
        seed: int = 0,
    ):
        super().__init__()
        self.spec = spec
        self.hparams = dict(channels=channels, depth=depth, heads=heads, mlp_ratio=mlp_ratio, seed=seed)
        with seeded(seed):
            self.student = StubEncoder(spec, channels, depth, heads, mlp_ratio)
            self.predictor = Predictor(spec.embed_dim)
        self.teacher = copy.deepcopy(self.student)
        self.teacher.requires_grad_(False)

    def set_finetune_mode(self) -> None:
        self.student.requires_grad_(True)
        self.student.proj.requires_grad_(False)
        self.predictor.requires_grad_(True)
        self.teacher.requires_grad_(False)

    @property
    def embed_dim(self) -> int:
        return self.spec.embed_dim

    def num_tokens(self, t: int, h: int, w: int) -> int:
        nt, nh, nw = self.spec.grid(t, h, w)
        return nt * nh * nw

    def _patches(self, frames) -> tuple[torch.Tensor, np.ndarray]:
        frames = torch.as_tensor(np.asarray(frames) if not isinstance(frames, torch.Tensor) else frames)
        frames = frames.to(self.student.proj.weight.dtype)
        t, h, w, c = frames.shape[-4:]
        if c * self.spec.temporal_width * self.spec.spatial_size**2 != self.student.proj.in_features:
            raise ShapeError(f"clip has {c} channels, backbone expects {self.hparams['channels']}")
        return patchify(frames, self.spec), grid_positions(*self.spec.grid(t, h, w))

    @torch.no_grad()
    def encode_frames(self, frames) -> torch.Tensor:
        """Teacher embedding for ``(..., T, H, W, C)`` frames -> ``(..., n_v, d)``."""
        was_training = self.teacher.training
        self.teacher.eval()
        patches, pos = self._patches(frames)
        out = self.teacher(patches, pos)
        self.teacher.train(was_training)
        return out

    def encode(self, clip: VideoClip) -> torch.Tensor:
        return self.encode_frames(clip.frames)

    def checkpoint_meta(self) -> dict:
        return {"provider": self.provider, "tubelet": asdict(self.spec), "hparams": dict(self.hparams)}

    @classmethod
    def from_meta(cls, meta: Mapping) -> "JEPABackbone":
        return build_backbone(meta["provider"], spec=TubeletSpec(**meta["tubelet"]), **meta["hparams"])


def _named_arrays(obj) -> dict[str, torch.Tensor]:
    if isinstance(obj, nn.Module):
        return dict(obj.named_parameters())
    return dict(obj)


@torch.no_grad()
def ema_update(teacher, student, momentum: float):
    """teacher <- m * teacher + (1 - m) * student, in place, for every named array."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    t_arrays, s_arrays = _named_arrays(teacher), _named_arrays(student)
    if t_arrays.keys() != s_arrays.keys():
        raise ShapeError(f"teacher/student names differ: {sorted(set(t_arrays) ^ set(s_arrays))}")
    for name, t in t_arrays.items():
        s = s_arrays[name]
        if t.shape != s.shape:
            raise ShapeError(f"{name}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        t.mul_(momentum).add_(s, alpha=1.0 - momentum)
    return teacher


def masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: TokenMask) -> torch.Tensor:
    """Mean absolute error between predictions and teacher tokens at masked positions only."""
    idx = torch.as_tensor(mask.masked_indices)
    return (pred - target[..., idx, :]).abs().mean()


def trainable_parameters(backbone: JEPABackbone) -> list[nn.Parameter]:
    params = [p for p in backbone.student.parameters() if p.requires_grad]
    return params + list(backbone.predictor.parameters())


def jepa_step(
    backbone: JEPABackbone,
    batch: Sequence[VideoClip] | torch.Tensor,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    mask_ratio: float = 0.75,
    momentum: float = 0.998,
    step: int = 0,
) -> float:
    """One self-supervised update; returns the masked L1 loss before the update.

    A single mask is shared across the batch, so the loss does not depend on
    clip order.
    """
    if isinstance(batch, torch.Tensor):
        frames = batch
    else:
        if len(batch) == 0:
            raise ValueError("empty batch")
        frames = np.stack([c.frames for c in batch])
    if len(frames) == 0:
        raise ValueError("empty batch")
    patches, pos = backbone._patches(frames)
    mask = sample_mask(patches.shape[-2], mask_ratio, rng)

    backbone.student.train()
    with torch.no_grad():
        backbone.teacher.eval()
        target = backbone.teacher(patches, pos)
    context = backbone.student(patches, pos, keep=mask.kept_indices)
    target_pos = backbone.student.position_encoding(pos[mask.masked_indices])
    pred = backbone.predictor(context, target_pos)
    loss = masked_l1(pred, target, mask)
    if not torch.isfinite(loss):
        raise DivergenceError("jepa_step", step, float(loss.detach()))

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    ema_update(backbone.teacher, backbone.student, momentum)
    return float(loss.detach())


def iter_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
