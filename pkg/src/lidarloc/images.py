"""8-bit grayscale image reading/writing (PGM natively, PNG via Pillow)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def read_gray(path) -> np.ndarray:
    """Read a PGM (P2/P5) or PNG file as a 2D uint8 array."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return _read_pgm(path)
    if suffix == ".png":
        from PIL import Image
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    raise ValueError(f"unsupported image format: {path}")


def write_gray(image: np.ndarray, path) -> None:
    path = Path(path)
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D grayscale array, got shape {image.shape}")
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        h, w = image.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(image.tobytes())
    elif suffix == ".png":
        from PIL import Image
        Image.fromarray(image, mode="L").save(path)
    else:
        raise ValueError(f"unsupported image format: {path}")


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed anywhere between them.
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(data):
        c = data[i:i + 1]
        if c == b"#":
            i = data.find(b"\n", i)
            if i < 0:
                break
            i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if len(tokens) < 4 or tokens[0] not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a valid PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    if tokens[0] == b"P5":
        i += 1  # single whitespace byte after maxval
        pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=i)
    else:
        pixels = np.asarray(data[i:].split()[: w * h], dtype=np.uint8)
    if pixels.size < w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).copy()
