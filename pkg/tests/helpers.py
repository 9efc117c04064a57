"""Shared helpers for the test modules."""

from __future__ import annotations

import torch

from fusionbench.backbone import JEPABackbone, TubeletSpec
from fusionbench.datapipe import ClipConfig, SyntheticSpec, make_synthetic_dataset
from fusionbench.decoder import AttentiveClassifier
from fusionbench.features import FeatureStore
from fusionbench.stream_encoder import StreamEncoder, StreamTokenizerSpec

TOY_DIM = 32
TOY_CLIP = ClipConfig(num_frames=4, frame_step=1)


def central_difference(fn, tensor: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of ``tensor`` (modified in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        plus = float(fn())
        flat[i] = orig - h
        minus = float(fn())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


# Below this norm a gradient is treated as identically zero (e.g. the key bias,
# which shifts every attention score equally); central differences with h=1e-6
# leave ~1e-9 of round-off there, so relative error is meaningless.
ZERO_GRADIENT = 1e-6


def gradient_error(analytic: torch.Tensor, numeric: torch.Tensor) -> tuple[str, float]:
    """("relative", err) normally; ("zero", max abs diff) when both gradients vanish."""
    if max(float(analytic.norm()), float(numeric.norm())) < ZERO_GRADIENT:
        return "zero", float((analytic - numeric).abs().max())
    return "relative", relative_error(analytic, numeric)


def toy_components(label_source: str, seed: int = 0):
    corpus = make_synthetic_dataset(seed, SyntheticSpec(label_source=label_source))
    backbone = JEPABackbone(TubeletSpec(2, 8, TOY_DIM), depth=2, heads=4, seed=seed)
    backbone.requires_grad_(False)
    store = FeatureStore(corpus.samples("train", TOY_CLIP), backbone)
    decoder = AttentiveClassifier(TOY_DIM, 2, heads=4, seed=seed + 1)
    encoder = StreamEncoder(4, StreamTokenizerSpec(2, 1, TOY_DIM), heads=4, depth=4, dropout=0.2, seed=seed + 2)
    return corpus, backbone, store, decoder, encoder
