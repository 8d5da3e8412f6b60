"""Shared primitives: image/mask containers, overlap metrics, seeded RNG, PPM/PGM I/O.

Images are ``(H, W, 3)`` uint8 arrays and masks are ``(H, W)`` uint8 arrays
holding 0/1. Both are plain numpy arrays; the ``as_image``/``as_mask``
helpers validate and normalise them at module boundaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeMismatch(ValueError):
    pass


def as_image(data) -> np.ndarray:
    img = np.asarray(data)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {img.shape}")
    if img.dtype != np.uint8:
        if np.any((img < 0) | (img > 255)):
            raise ValueError("image intensities must lie in [0, 255]")
        img = img.astype(np.uint8)
    return img


def as_mask(data) -> np.ndarray:
    mask = np.asarray(data)
    if mask.ndim != 2:
        raise ValueError(f"mask must have shape (H, W), got {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    return mask.astype(np.uint8)


# ---------------------------------------------------------------------------
# metrics


def _overlap(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    inter = int(np.count_nonzero(a & b))
    return inter, int(np.count_nonzero(a)), int(np.count_nonzero(b))


def dice(a, b) -> float:
    """Dice overlap ``2|A∩B| / (|A|+|B|)``; two empty masks score 1.0."""
    inter, na, nb = _overlap(a, b)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def iou(a, b) -> float:
    """Intersection over union; two empty masks score 1.0."""
    inter, na, nb = _overlap(a, b)
    union = na + nb - inter
    if union == 0:
        return 1.0
    return inter / union


@dataclass(frozen=True)
class Metrics:
    dice: float
    iou: float

    @classmethod
    def of(cls, pred, gt) -> "Metrics":
        return cls(dice=dice(pred, gt), iou=iou(pred, gt))

    def to_json(self) -> str:
        return json.dumps({"dice": self.dice, "iou": self.iou})

    @classmethod
    def from_json(cls, text: str) -> "Metrics":
        obj = json.loads(text)
        return cls(dice=float(obj["dice"]), iou=float(obj["iou"]))


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Counter-based generator keyed by ``(seed, stream)``.

    Backed by numpy's Philox bit generator, so independent streams can be
    derived from the same seed without sharing state. Single owner only.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)

    def next_float(self) -> float:
        return float(self._gen.random())

    def next_int(self, n: int) -> int:
        if n < 1:
            raise ValueError("next_int requires n >= 1")
        return int(self._gen.integers(0, n))

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        return self._gen.choice(n, size=k, replace=False)


# ---------------------------------------------------------------------------
# netpbm I/O


def _read_netpbm(path):
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    # magic, width, height, maxval; '#' comments allowed between tokens
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated netpbm header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0].decode("ascii")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit netpbm files are supported (maxval={maxval})")
    return magic, width, height, raw[pos:]


def read_ppm(path) -> np.ndarray:
    magic, width, height, body = _read_netpbm(path)
    if magic != "P6":
        raise ValueError(f"{path}: expected binary PPM (P6), got {magic}")
    n = width * height * 3
    if len(body) < n:
        raise ValueError(f"{path}: raster too short")
    return np.frombuffer(body[:n], dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, img) -> None:
    img = as_image(img)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm_mask(path) -> np.ndarray:
    """Read a P5 mask; values >= 128 are foreground."""
    magic, width, height, body = _read_netpbm(path)
    if magic != "P5":
        raise ValueError(f"{path}: expected binary PGM (P5), got {magic}")
    n = width * height
    if len(body) < n:
        raise ValueError(f"{path}: raster too short")
    gray = np.frombuffer(body[:n], dtype=np.uint8).reshape(height, width)
    return (gray >= 128).astype(np.uint8)


def write_pgm_mask(path, mask) -> None:
    mask = as_mask(mask)
    h, w = mask.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + (mask * 255).astype(np.uint8).tobytes())
