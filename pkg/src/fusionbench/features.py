from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .backbone import JEPABackbone
from .datapipe import ClipSample


class FeatureStore:
    """Lazily computed, cached inputs for a fixed list of clip samples.

    The backbone is frozen everywhere this is used, so its embeddings are
    computed once per sample and reused across epochs and steps.
    """

    def __init__(self, samples: Sequence[ClipSample], backbone: JEPABackbone, dtype=torch.float32):
        self.samples = list(samples)
        self.backbone = backbone
        self.dtype = dtype
        self._state: dict[int, torch.Tensor] = {}
        self._streams: dict[int, torch.Tensor] = {}
        self.labels = np.array([s.label for s in self.samples], dtype=np.int64)

    def __len__(self):
        return len(self.samples)

    def states(self, idx) -> torch.Tensor:
        idx = [int(i) for i in idx]
        todo = [i for i in idx if i not in self._state]
        if todo:
            frames = np.stack([self.samples[i].clip.frames for i in todo])
            enc = self.backbone.encode_frames(frames).to(self.dtype)
            for i, e in zip(todo, enc):
                self._state[i] = e
        return torch.stack([self._state[i] for i in idx])

    def streams(self, idx) -> torch.Tensor:
        idx = [int(i) for i in idx]
        for i in idx:
            if i not in self._streams:
                self._streams[i] = torch.as_tensor(self.samples[i].stream_window.values, dtype=self.dtype)
        return torch.stack([self._streams[i] for i in idx])

    def targets(self, idx) -> torch.Tensor:
        return torch.as_tensor(self.labels[np.asarray(idx, dtype=np.int64)])
