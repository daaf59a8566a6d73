"""Binary PPM (P6) / PGM (P5) images, 8-bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _header(kind: bytes, w: int, h: int) -> bytes:
    return kind + b"\n%d %d\n255\n" % (w, h)


def write_ppm(path, img: np.ndarray) -> None:
    """``img`` is [3,H,W] float in [0,1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3,H,W], got {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = q.shape
    Path(path).write_bytes(_header(b"P6", w, h) + q.transpose(1, 2, 0).tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary mask [1,H,W] or [H,W] written as 0/255."""
    m = np.asarray(mask).reshape(np.asarray(mask).shape[-2:])
    h, w = m.shape
    Path(path).write_bytes(_header(b"P5", w, h) + (np.where(m > 0, 255, 0).astype(np.uint8)).tobytes())


def _parse(blob: bytes, magic: bytes):
    if blob[:2] != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields, pos = [], 2
    while len(fields) < 3:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only 8-bit images are supported")
    return w, h, blob[pos + 1:]


def read_ppm(path) -> np.ndarray:
    """-> [3,H,W] float32 in [0,1]."""
    w, h, raw = _parse(Path(path).read_bytes(), b"P6")
    arr = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def read_pgm(path) -> np.ndarray:
    """-> [1,H,W] uint8 mask with values {0,1}."""
    w, h, raw = _parse(Path(path).read_bytes(), b"P5")
    arr = np.frombuffer(raw, dtype=np.uint8, count=w * h).reshape(1, h, w)
    return (arr > 127).astype(np.uint8)
