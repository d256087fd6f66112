"""Exact Euclidean distance transform to the object boundary.

The boundary of a mask is the set of foreground pixels with at least one
background 4-neighbor. Positions outside the image count as background
along any axis of extent > 1; along a degenerate axis of extent 1 there
is no neighbor in that direction (so a 1-pixel-tall strip is bounded only
left/right). For the 1x1 image the single foreground pixel is its own
boundary.

Squared distances are exact: the transform reports, for every pixel, the
integer squared Euclidean distance to the nearest boundary pixel, and
``edt`` is its square root. A brute-force oracle over all boundary pixels
is provided for verification.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import EmptyForegroundError
from .raster import as_mask


def boundary_mask(mask) -> np.ndarray:
    """Bool map of boundary pixels (foreground with a background 4-neighbor)."""
    m = as_mask(mask)
    if not m.any():
        raise EmptyForegroundError("mask has no foreground pixel")
    h, w = m.shape
    if h == 1 and w == 1:
        return m.copy()
    # pad with background where an outside exists, replicate along extent-1 axes
    padded = np.pad(m, ((1, 1), (0, 0)), mode="constant" if h > 1 else "edge")
    padded = np.pad(padded, ((0, 0), (1, 1)), mode="constant" if w > 1 else "edge")
    up = padded[:-2, 1:-1]
    down = padded[2:, 1:-1]
    left = padded[1:-1, :-2]
    right = padded[1:-1, 2:]
    return m & ~(up & down & left & right)


def boundary_set(mask) -> np.ndarray:
    """Boundary pixel coordinates as an (N, 2) int array of (row, col), row-major order."""
    return np.argwhere(boundary_mask(mask))


def edt_squared(mask) -> np.ndarray:
    """Exact integer squared Euclidean distance to the nearest boundary pixel."""
    b = boundary_mask(mask)
    nearest = ndimage.distance_transform_edt(~b, return_distances=False, return_indices=True)
    h, w = b.shape
    dy = nearest[0].astype(np.int64) - np.arange(h, dtype=np.int64)[:, None]
    dx = nearest[1].astype(np.int64) - np.arange(w, dtype=np.int64)[None, :]
    return dy * dy + dx * dx


def edt(mask) -> np.ndarray:
    """Euclidean distance map in pixel units (float64, zero on boundary pixels)."""
    return np.sqrt(edt_squared(mask).astype(np.float64))


def edt_squared_brute(mask, chunk_rows: int = 256) -> np.ndarray:
    """Brute-force oracle: min over all boundary pixels of the integer squared distance.

    O(pixels * |boundary|); use for verification only.
    """
    b = boundary_set(mask)
    h, w = as_mask(mask).shape
    by = b[:, 0].astype(np.int64)
    bx = b[:, 1].astype(np.int64)
    cols = np.arange(w, dtype=np.int64)
    dx2 = (cols[:, None] - bx[None, :]) ** 2  # (w, |B|)
    out = np.empty((h, w), dtype=np.int64)
    for start in range(0, h, chunk_rows):
        rows = np.arange(start, min(start + chunk_rows, h), dtype=np.int64)
        dy2 = (rows[:, None] - by[None, :]) ** 2  # (rows, |B|)
        d2 = dy2[:, None, :] + dx2[None, :, :]
        out[start : start + len(rows)] = d2.min(axis=2)
    return out
