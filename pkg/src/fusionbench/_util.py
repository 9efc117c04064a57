from __future__ import annotations

import contextlib
import hashlib
import json
import os
from typing import Iterator, Mapping

import numpy as np
import torch

DETERMINISTIC_ENV = "FUSIONBENCH_DETERMINISTIC"


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0")


def enable_determinism() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


@contextlib.contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block under a fixed torch seed without disturbing the global stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """[sin | cos] encoding of integer positions; odd ``dim`` gets a zero pad column."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    out = np.zeros((positions.size, dim), dtype=np.float64)
    half = dim // 2
    if half == 0:
        return out
    omega = 1.0 / 10000.0 ** (np.arange(half, dtype=np.float64) / half)
    angles = positions[:, None] * omega[None, :]
    out[:, :half] = np.sin(angles)
    out[:, half : 2 * half] = np.cos(angles)
    return out


def sincos_3d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Concatenated (time, row, col) encodings.

    Row and column each get ``2 * (dim // 6)`` channels, time takes the rest.
    """
    positions = np.asarray(positions)
    d_hw = 2 * (dim // 6)
    d_t = dim - 2 * d_hw
    return np.concatenate(
        [
            sincos_1d(positions[:, 0], d_t),
            sincos_1d(positions[:, 1], d_hw),
            sincos_1d(positions[:, 2], d_hw),
        ],
        axis=1,
    )


def tensor_hash(arrays: Mapping[str, torch.Tensor | np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        value = arrays[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().contiguous().numpy()
        value = np.ascontiguousarray(value)
        h.update(name.encode())
        h.update(str(value.dtype).encode())
        h.update(repr(value.shape).encode())
        h.update(value.tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return tensor_hash(dict(module.state_dict()))


def json_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(payload.encode()).hexdigest()

