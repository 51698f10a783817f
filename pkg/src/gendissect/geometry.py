"""Shape rasters shared by the scene renderer and the oracle segmenter.

A concept shape is grown from a single featuremap cell by the same
upsample/dilate cascade the generator tail applies, so the renderer's
footprint and the segmenter's template are the same raster by construction.
"""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

FM = 8
IMG = 64
BLOCK = IMG // FM

VERT = ((-1, 0), (0, 0), (1, 0))
HORIZ = ((0, -1), (0, 0), (0, 1))
DIAMOND = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


def dilate(mask: np.ndarray, taps: Sequence[Tuple[int, int]]) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    for dy, dx in taps:
        src = mask[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
        out[max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)] |= src
    return out


def _ups2(mask: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(mask, 2, axis=0), 2, axis=1)


def concept_footprint(shape: str, site: Tuple[int, int]) -> np.ndarray:
    """IMG x IMG mask produced by one gated cell, mirroring the tail cascade."""
    mask = np.zeros((FM, FM), dtype=bool)
    if shape == "stripe":
        mask[site[0], :] = True
    else:
        mask[site] = True
    mask = _ups2(mask)                       # 16x16
    if shape == "rect":
        mask = dilate(mask, VERT)
    elif shape == "disc":
        mask = dilate(mask, DIAMOND)
    mask = _ups2(mask)                       # 32x32
    if shape == "rect":
        mask = dilate(mask, HORIZ)
    elif shape == "disc":
        mask = dilate(mask, DIAMOND)
    return _ups2(mask)                       # 64x64


def footprint_patch(shape: str) -> np.ndarray:
    """Tight canonical patch for one gated cell of the given shape."""
    mask = concept_footprint(shape, (4, 4) if shape != "stripe" else (4, 0))
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
