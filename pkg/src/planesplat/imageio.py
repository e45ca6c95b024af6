"""16-bit PGM label maps and PFM float maps."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm16(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("PGM maps must be 2-D")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValueError("label values must fit in 16 bits")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(labels.astype(">u2").tobytes())


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos + 1


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    body = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return body.reshape(h, w).astype(np.int64)


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM; 2-D arrays as greyscale, (H, W, 3) as colour."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        magic = "Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = "PF"
    else:
        raise ValueError("PFM holds 1 or 3 channels")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, scale), pos = _tokens(data, 4)
    channels = {b"Pf": 1, b"PF": 3}.get(magic)
    if channels is None:
        raise ValueError(f"{path}: not a PFM file")
    w, h, scale = int(w), int(h), float(scale)
    dtype = "<f4" if scale < 0 else ">f4"
    body = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos).astype(np.float64)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return body.reshape(shape)[::-1].copy()
