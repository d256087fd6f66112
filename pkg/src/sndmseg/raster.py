"""Raster primitives and file formats.

Arrays are the carriers: a binary mask is a bool array of shape (H, W)
with True marking foreground, a float map is a float32 array of shape
(H, W), and an RGB image is a float32 array of shape (H, W, 3) with
values in [0, 1].

On disk, masks are binary PGM (P5, 0/255), images are binary PPM (P6),
and float maps use a small container: the magic bytes b"SNDM", width and
height as 32-bit little-endian unsigned integers, then width*height
32-bit little-endian IEEE-754 floats in row-major order.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import (
    IoFailureError,
    MalformedHeaderError,
    MissingFileError,
    ShapeMismatchError,
    TruncatedPayloadError,
)

FLOAT_MAP_MAGIC = b"SNDM"


def as_mask(mask) -> np.ndarray:
    """Coerce to a valid (H, W) bool mask array."""
    m = np.asarray(mask)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeMismatchError(f"mask must be 2-d and nonempty, got shape {m.shape}")
    if m.dtype != np.bool_:
        m = m.astype(bool)
    return m


def as_float_map(values) -> np.ndarray:
    """Coerce to a valid (H, W) float map; values must be finite."""
    v = np.asarray(values)
    if v.dtype not in (np.float32, np.float64):
        v = v.astype(np.float32)
    if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
        raise ShapeMismatchError(f"float map must be 2-d and nonempty, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError("float map contains non-finite values")
    return v


def as_image(values) -> np.ndarray:
    """Coerce to a valid (H, W, 3) float32 image with values in [0, 1]."""
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 3 or v.shape[2] != 3 or v.shape[0] < 1 or v.shape[1] < 1:
        raise ShapeMismatchError(f"image must have shape (H, W, 3), got {v.shape}")
    if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
        raise ValueError("image values must be finite and in [0, 1]")
    return v


def threshold_to_mask(values) -> np.ndarray:
    """Sign rule: strictly positive values are foreground, the rest background.

    Exactly 0.0 maps to background; it never occurs in an encoded map and
    only arises from untrained network output, so one fixed convention
    suffices.
    """
    v = np.asarray(values)
    if v.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-d map, got shape {v.shape}")
    return v > 0


# ---------------------------------------------------------------------------
# atomic file writing


def _atomic_write(path: str, payload: bytes) -> None:
    """Write payload to path via a temp file + rename; no partial outputs."""
    directory = os.path.dirname(os.path.abspath(path))
    tmp_path = None
    try:
        fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_path, path)
        tmp_path = None
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc
    finally:
        if tmp_path is not None:
            try:
                os.unlink(tmp_path)
            except OSError:
                pass


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as handle:
            return handle.read()
    except FileNotFoundError as exc:
        raise MissingFileError(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# PNM (PGM/PPM) parsing


def _parse_pnm_header(data: bytes, magic: bytes, path: str):
    """Return (width, height, maxval, payload_offset) for a binary PNM file."""
    if not data.startswith(magic):
        raise MalformedHeaderError(f"{path}: expected {magic.decode()} header")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        # skip whitespace and '#' comment lines between header tokens
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise MalformedHeaderError(f"{path}: bad header token {token!r}")
        fields.append(int(token))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise MalformedHeaderError(f"{path}: missing delimiter after maxval")
    pos += 1  # exactly one whitespace byte separates header and payload
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"{path}: bad dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise MalformedHeaderError(f"{path}: only 8-bit payloads supported, maxval={maxval}")
    return width, height, maxval, pos


def read_mask(path: str) -> np.ndarray:
    """Read a binary PGM (P5) file as a bool mask; values >= 128 are foreground."""
    data = _read_bytes(path)
    width, height, _, offset = _parse_pnm_header(data, b"P5", path)
    expected = width * height
    payload = data[offset : offset + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} pixels, got {len(payload)}")
    gray = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return gray >= 128


def write_mask(mask, path: str) -> None:
    """Write a bool mask as binary PGM (P5) with foreground=255, background=0."""
    m = as_mask(mask)
    height, width = m.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    payload = np.where(m, np.uint8(255), np.uint8(0)).tobytes()
    _atomic_write(path, header + payload)


def read_image(path: str) -> np.ndarray:
    """Read a binary PPM (P6) file as an (H, W, 3) float32 image in [0, 1]."""
    data = _read_bytes(path)
    width, height, maxval, offset = _parse_pnm_header(data, b"P6", path)
    expected = width * height * 3
    payload = data[offset : offset + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, got {len(payload)}")
    rgb = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return (rgb.astype(np.float32) / np.float32(maxval)).clip(0.0, 1.0)


def write_image(image, path: str) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary PPM (P6)."""
    img = as_image(image)
    height, width, _ = img.shape
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    payload = np.rint(img * 255.0).astype(np.uint8).tobytes()
    _atomic_write(path, header + payload)


# ---------------------------------------------------------------------------
# float map container


def write_float_map(values, path: str) -> None:
    """Write an (H, W) float map in the binary float-map container.

    Read-back with :func:`read_float_map` is bit-identical (values are
    stored as little-endian float32).
    """
    v = as_float_map(values).astype("<f4")
    height, width = v.shape
    header = FLOAT_MAP_MAGIC + struct.pack("<II", width, height)
    _atomic_write(path, header + v.tobytes())


def read_float_map(path: str) -> np.ndarray:
    """Read a float map written by :func:`write_float_map`."""
    data = _read_bytes(path)
    if len(data) < 12 or not data.startswith(FLOAT_MAP_MAGIC):
        raise MalformedHeaderError(f"{path}: not a float-map file")
    width, height = struct.unpack("<II", data[4:12])
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"{path}: bad dimensions {width}x{height}")
    expected = 12 + 4 * width * height
    if len(data) < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, got {len(data)}")
    flat = np.frombuffer(data[12:expected], dtype="<f4")
    return flat.reshape(height, width).astype(np.float32)
