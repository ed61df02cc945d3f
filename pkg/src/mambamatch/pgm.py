"""8-bit binary PGM (P5) reading and writing.

The single bit-exact image format of the project; anything else (P6 color,
ASCII P2, 16-bit) is rejected with a clear message.
"""

from __future__ import annotations

import numpy as np

__all__ = ["read_pgm", "write_pgm"]


def _token(stream) -> bytes:
    # whitespace-delimited token, skipping '#' comment lines
    tok = b""
    while True:
        ch = stream.read(1)
        if not ch:
            raise ValueError("truncated PGM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM into a (H, W) uint8 array."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic == b"P6":
            raise ValueError(f"{path}: color P6 images are not supported, convert to P5 grayscale")
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary P5 PGM (magic {magic!r})")
        width = int(_token(f))
        height = int(_token(f))
        maxval = int(_token(f))
        if maxval != 255:
            raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
        payload = f.read(width * height)
    if len(payload) != width * height:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, image: np.ndarray) -> None:
    """Write a (H, W) array as P5; float inputs are clipped to [0, 255]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D grayscale array, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())
