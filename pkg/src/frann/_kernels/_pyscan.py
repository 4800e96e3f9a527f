"""Pure-numpy fallback for the scan kernels.

Accumulates float32 in the same left-to-right subspace order as the
compiled kernel, so both backends produce bit-identical scores.
"""

from __future__ import annotations

import numpy as np

BLOCK = 32


def _gather_nibbles(blocks: np.ndarray, count: int) -> np.ndarray:
    """Unpack the first `count` codes into an (count, M) nibble array."""
    idx = np.arange(count)
    block = idx >> 5
    lane = idx & 31
    # (count, M) bytes holding the code nibble for every subspace
    packed = blocks[block, :, lane >> 1]
    shift = ((lane & 1) * 4).astype(np.uint8)
    return (packed >> shift[:, None]) & 0xF


def scan_codes_f32(blocks: np.ndarray, count: int, lut: np.ndarray,
                   out: np.ndarray) -> None:
    if count == 0:
        return
    nib = _gather_nibbles(blocks, count)
    acc = np.zeros(count, dtype=np.float32)
    for j in range(lut.shape[0]):
        acc += lut[j, nib[:, j]]
    out[:count] = acc


def scan_codes_q8(blocks: np.ndarray, count: int, lut: np.ndarray,
                  scale: float, bias: float, out: np.ndarray) -> None:
    if count == 0:
        return
    nib = _gather_nibbles(blocks, count)
    acc = np.zeros(count, dtype=np.uint32)
    for j in range(lut.shape[0]):
        acc += lut[j, nib[:, j]]
    out[:count] = acc.astype(np.float32) * np.float32(scale) + np.float32(bias)
