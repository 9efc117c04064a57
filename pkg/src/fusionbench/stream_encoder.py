"""Cross-attention stream encoder that injects time-resolved data into the video state.

Each fusion layer computes::

    q  = Wq s + bq                  (no norm on the state)
    k  = Wk |t| + bk,  v = Wv |t| + bv
    s~ = s + Wo attn(q, k, v) + bo
    s' = s~ + psi(|s~|)

where ``|.|`` is layer norm and ``psi`` is Linear-GELU-Linear. The q/k/v
projections belong to the modality and are shared by every layer; output
projection, norms and ``psi`` are per layer. ``Wo``, ``bo`` and the last
``psi`` layer start at zero, so a fresh encoder is the identity on the state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ._attention import multihead_attention
from ._util import seeded, sincos_1d
from .errors import ShapeError


@dataclass
class StreamSeries:
    values: np.ndarray  # (S, T)
    timestamps: np.ndarray  # (T,) seconds
    names: list[str] = field(default_factory=list)
    units: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        s, t = self.values.shape
        if self.timestamps.shape != (t,):
            raise ShapeError(f"{t} samples per channel but {self.timestamps.size} timestamps")
        if t > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("stream timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("stream values must be finite")
        if not self.names:
            self.names = [f"ch{i}" for i in range(s)]
        if not self.units:
            self.units = [""] * s
        if len(self.names) != s or len(self.units) != s:
            raise ShapeError("names/units must match the channel count")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.timestamps.size

    def slice(self, start: int, stop: int, step: int = 1) -> "StreamSeries":
        return StreamSeries(
            self.values[:, start:stop:step], self.timestamps[start:stop:step], list(self.names), list(self.units)
        )


@dataclass(frozen=True)
class StreamTokenizerSpec:
    window: int = 2
    stride: int = 1
    embed_dim: int = 64

    def __post_init__(self):
        if self.window < 1 or self.stride < 1 or self.embed_dim < 1:
            raise ValueError(f"invalid stream tokenizer spec {self}")

    def windows(self, length: int) -> int:
        if length < self.window:
            raise ShapeError(f"channel of length {length} shorter than window {self.window}")
        return (length - self.window) // self.stride + 1


class StreamTokenizer(nn.Module):
    """Per-channel sliding-window projection plus channel and temporal codes."""

    def __init__(self, n_channels: int, spec: StreamTokenizerSpec, temporal_encoding: bool = True):
        super().__init__()
        self.spec = spec
        self.n_channels = n_channels
        self.temporal_encoding = temporal_encoding
        d, w = spec.embed_dim, spec.window
        bound = 1.0 / np.sqrt(w)
        self.weight = nn.Parameter(torch.empty(n_channels, w, d).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(n_channels, d))
        self.channel_embed = nn.Parameter(0.02 * torch.randn(n_channels, d))

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        # values (..., S, T) -> (..., S * n_w, d), channel-major
        if values.shape[-2] != self.n_channels:
            raise ShapeError(f"expected {self.n_channels} channels, got {values.shape[-2]}")
        n_w = self.spec.windows(values.shape[-1])
        win = values.unfold(-1, self.spec.window, self.spec.stride)  # (..., S, n_w, w)
        tok = torch.einsum("...swk,skd->...swd", win, self.weight)
        tok = tok + (self.bias + self.channel_embed)[:, None, :]
        if self.temporal_encoding:
            pe = sincos_1d(np.arange(n_w), self.spec.embed_dim)
            tok = tok + torch.as_tensor(pe, dtype=tok.dtype)
        return tok.reshape(*tok.shape[:-3], self.n_channels * n_w, self.spec.embed_dim)


def tokenize_streams(streams: StreamSeries, tokenizer: StreamTokenizer) -> torch.Tensor:
    values = torch.as_tensor(streams.values, dtype=tokenizer.weight.dtype)
    return tokenizer(values)


class FusionLayer(nn.Module):
    """Per-layer part of one fusion step; the q/k/v transforms live on the encoder."""

    def __init__(self, dim, mlp_ratio=4.0, dropout=0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm_tokens = nn.LayerNorm(dim)
        self.out = nn.Linear(dim, dim)
        self.norm_state = nn.LayerNorm(dim)
        self.psi = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, dim))


class FusionEncoder(nn.Module):
    def __init__(self, dim, heads=4, depth=4, dropout=0.2, mlp_ratio=4.0, n_modalities=1):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"embedding dim {dim} not divisible by {heads} heads")
        if depth < 1:
            raise ValueError("fusion encoder needs at least one layer")
        self.dim, self.heads, self.depth, self.dropout = dim, heads, depth, dropout
        self.n_modalities = n_modalities
        self.q = nn.ModuleList(nn.Linear(dim, dim) for _ in range(n_modalities))
        self.k = nn.ModuleList(nn.Linear(dim, dim) for _ in range(n_modalities))
        self.v = nn.ModuleList(nn.Linear(dim, dim) for _ in range(n_modalities))
        self.layers = nn.ModuleList(
            nn.ModuleList(FusionLayer(dim, mlp_ratio, dropout) for _ in range(n_modalities)) for _ in range(depth)
        )

    def zero_residuals(self):
        for per_mod in self.layers:
            for layer in per_mod:
                nn.init.zeros_(layer.out.weight)
                nn.init.zeros_(layer.out.bias)
                nn.init.zeros_(layer.psi[-1].weight)
                nn.init.zeros_(layer.psi[-1].bias)

    def fusion_layer(self, tokens, state, layer: int, modality: int = 0):
        """Apply fusion layer ``layer`` (0-based) of ``modality`` to ``state``."""
        if tokens.shape[-1] != self.dim or state.shape[-1] != self.dim:
            raise ShapeError(f"token/state width must be {self.dim}")
        lp = self.layers[layer][modality]
        t_norm = lp.norm_tokens(tokens)
        q = self.q[modality](state)
        k = self.k[modality](t_norm)
        v = self.v[modality](t_norm)
        attn = multihead_attention(q, k, v, self.heads, self.dropout, self.training)
        s_tilde = state + lp.out(attn)
        return s_tilde + lp.psi(lp.norm_state(s_tilde))

    def forward(self, tokens, state):
        if isinstance(tokens, torch.Tensor):
            tokens = [tokens]
        if len(tokens) != self.n_modalities:
            raise ShapeError(f"expected {self.n_modalities} token sequences, got {len(tokens)}")
        for layer in range(self.depth):
            for m, t_m in enumerate(tokens):
                state = self.fusion_layer(t_m, state, layer, m)
        return state

    def layer_params(self, layer: int, modality: int = 0) -> dict[str, torch.Tensor]:
        """Every tensor the given layer reads, keyed by role."""
        lp = self.layers[layer][modality]
        out = {}
        for role in ("q", "k", "v"):
            lin = getattr(self, role)[modality]
            out[f"W{role}"], out[f"b{role}"] = lin.weight, lin.bias
        out["Wo"], out["bo"] = lp.out.weight, lp.out.bias
        return out

    def sharing_metadata(self) -> dict:
        return {
            "shared_across_layers": [f"{r}.{m}" for m in range(self.n_modalities) for r in ("q", "k", "v")],
            "per_layer": ["norm_tokens", "out", "norm_state", "psi"],
            "depth": self.depth,
        }


def encode_streams(tokens, state, params: FusionEncoder):
    return params(tokens, state)


def init_fusion_params(dim, heads=4, depth=4, seed=0, dropout=0.2, mlp_ratio=4.0, n_modalities=1) -> FusionEncoder:
    if dim % heads:
        raise ShapeError(f"embedding dim {dim} not divisible by {heads} heads")
    with seeded(seed):
        enc = FusionEncoder(dim, heads, depth, dropout, mlp_ratio, n_modalities)
    enc.zero_residuals()
    return enc


class StreamEncoder(nn.Module):
    """Tokenizer plus fusion stack: raw stream windows and video state in, updated state out."""

    def __init__(
        self,
        n_channels: int,
        tokenizer_spec: StreamTokenizerSpec,
        heads: int = 4,
        depth: int = 4,
        dropout: float = 0.2,
        mlp_ratio: float = 4.0,
        seed: int = 0,
    ):
        super().__init__()
        self.config = dict(
            n_channels=n_channels,
            window=tokenizer_spec.window,
            stride=tokenizer_spec.stride,
            embed_dim=tokenizer_spec.embed_dim,
            heads=heads,
            depth=depth,
            dropout=dropout,
            mlp_ratio=mlp_ratio,
            seed=seed,
        )
        with seeded(seed):
            self.tokenizer = StreamTokenizer(n_channels, tokenizer_spec)
        self.fusion = init_fusion_params(tokenizer_spec.embed_dim, heads, depth, seed + 1, dropout, mlp_ratio)

    @classmethod
    def from_config(cls, config: dict) -> "StreamEncoder":
        c = dict(config)
        spec = StreamTokenizerSpec(c.pop("window"), c.pop("stride"), c.pop("embed_dim"))
        return cls(tokenizer_spec=spec, **c)

    def forward(self, stream_values: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        return self.fusion(self.tokenizer(stream_values), state)
