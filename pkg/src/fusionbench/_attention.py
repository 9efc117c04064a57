from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .errors import ShapeError


def multihead_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    dropout: float = 0.0,
    training: bool = False,
) -> torch.Tensor:
    """Scaled dot-product attention on already-projected ``(..., n, d)`` inputs.

    Heads are formed by splitting the last axis; the result is re-merged to
    ``(..., n_q, d)`` before any output projection.
    """
    d = q.shape[-1]
    if d % heads:
        raise ShapeError(f"embedding dim {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"q/k/v widths differ: {d}, {k.shape[-1]}, {v.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("keys and values have different token counts")
    dh = d // heads

    def split(x):
        return x.reshape(*x.shape[:-1], heads, dh).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-2, -1) / math.sqrt(dh)
    weights = torch.softmax(scores, dim=-1)
    if dropout > 0.0 and training:
        weights = F.dropout(weights, p=dropout, training=True)
    out = weights @ vh
    return out.transpose(-3, -2).reshape(*q.shape[:-1], d)
