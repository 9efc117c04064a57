"""Attentive classifier head: a learned query pools the state tokens."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._attention import multihead_attention
from ._util import seeded
from .errors import ShapeError


class AttentiveClassifier(nn.Module):
    def __init__(self, dim, n_classes, heads=4, n_queries=1, mlp_ratio=4.0, seed=0):
        super().__init__()
        if n_classes < 2:
            raise ValueError("a classifier needs at least two classes")
        if dim % heads:
            raise ShapeError(f"embedding dim {dim} not divisible by {heads} heads")
        self.config = dict(dim=dim, n_classes=n_classes, heads=heads, n_queries=n_queries, mlp_ratio=mlp_ratio, seed=seed)
        self.dim, self.heads, self.n_classes = dim, heads, n_classes
        hidden = int(dim * mlp_ratio)
        with seeded(seed):
            self.query = nn.Parameter(0.02 * torch.randn(n_queries, dim))
            self.norm_kv = nn.LayerNorm(dim)
            self.q = nn.Linear(dim, dim)
            self.k = nn.Linear(dim, dim)
            self.v = nn.Linear(dim, dim)
            self.out = nn.Linear(dim, dim)
            self.norm_mlp = nn.LayerNorm(dim)
            self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
            self.head = nn.Linear(dim, n_classes)

    @classmethod
    def from_config(cls, config: dict) -> "AttentiveClassifier":
        return cls(**config)

    def forward(self, state: torch.Tensor) -> torch.Tensor:
        """(..., n_s, d) state -> (..., n_classes) logits."""
        if state.shape[-1] != self.dim:
            raise ShapeError(f"state width {state.shape[-1]} != classifier width {self.dim}")
        kv = self.norm_kv(state)
        query = self.query.expand(*state.shape[:-2], *self.query.shape)
        x = query + self.out(multihead_attention(self.q(query), self.k(kv), self.v(kv), self.heads))
        x = x + self.mlp(self.norm_mlp(x))
        return self.head(x).mean(dim=-2)


def classify(state: torch.Tensor, params: AttentiveClassifier) -> torch.Tensor:
    return params(state)


def predict(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
    return logits.argmax(dim=-1)


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean of -log softmax(logits)[label]; accepts a single example or a batch."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes: {labels.tolist()}")
    if logits.ndim == 1:
        logits, labels = logits[None], labels.reshape(1)
    return F.cross_entropy(logits, labels, reduction="mean")
