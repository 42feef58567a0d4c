"""Binary netpbm (P5 greyscale / P6 RGB, maxval 255) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    pass


def write_pgm(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {data.shape}")
    _write(path, b"P5", data)


def write_ppm(path, data: np.ndarray) -> None:
    """``data`` is (H, W, 3) uint8."""
    data = np.asarray(data)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got shape {data.shape}")
    _write(path, b"P6", data)


def _write(path, magic: bytes, data: np.ndarray) -> None:
    if data.min(initial=0) < 0 or data.max(initial=0) > 255:
        raise ValueError("pixel values must lie in [0, 255]")
    h, w = data.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + data.astype(np.uint8).tobytes())


def _tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PnmError("truncated header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Return (H, W) uint8 for P5 and (H, W, 3) uint8 for P6."""
    raw = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), pos = _tokens(raw, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (PnmError, ValueError) as exc:
        raise PnmError(f"{path}: bad header ({exc})") from None
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"{path}: unsupported format {magic!r}")
    if maxval != 255:
        raise PnmError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = w * h * channels
    body = raw[pos:]
    if len(body) != expected:
        raise PnmError(f"{path}: expected {expected} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)
