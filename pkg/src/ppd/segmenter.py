"""Promptable segmenter contract and the nearest-prompt proxy used in place of SAM.

Any callable ``seg(img, prompts) -> mask`` where ``prompts`` is a sequence of
``(x, y, polarity)`` triples (polarity +1 foreground, -1 background) satisfies
the contract used by the environment. It must be a pure function of the image
and the active prompt set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Segmenter = Callable[[np.ndarray, Sequence[tuple]], np.ndarray]


@dataclass(frozen=True)
class SegmenterConfig:
    alpha: float = 0.5  # weight of the spatial term; 1 - alpha goes to colour

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def segment(img: np.ndarray, prompts, cfg: SegmenterConfig = SegmenterConfig()) -> np.ndarray:
    """Label every pixel with the polarity of its nearest prompt.

    Distance mixes normalised pixel distance and normalised RGB distance::

        d(q, p) = alpha * |pos(q) - pos(p)| / diag + (1 - alpha) * |rgb(q) - rgb(p)| / sqrt(3)

    with rgb scaled to [0, 1]. Exact ties go to the prompt listed first, so
    callers pass prompts in ascending id order. No prompts gives all background.
    """
    h, w = img.shape[:2]
    if len(prompts) == 0:
        return np.zeros((h, w), dtype=np.uint8)
    pts = np.asarray([(p[0], p[1]) for p in prompts], dtype=np.int64)
    pol = np.asarray([p[2] for p in prompts])
    if np.any(pts[:, 0] < 0) or np.any(pts[:, 0] >= w) or np.any(pts[:, 1] < 0) or np.any(pts[:, 1] >= h):
        raise ValueError("prompt outside image")

    diag = math.sqrt(w * w + h * h)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    dx2 = (xs[:, None] - pts[:, 0]) ** 2  # (w, k)
    dy2 = (ys[:, None] - pts[:, 1]) ** 2  # (h, k)
    spatial = np.sqrt(dy2[:, None, :] + dx2[None, :, :]).reshape(h * w, -1)
    spatial *= cfg.alpha / diag

    # |a - b|^2 = |a|^2 + |b|^2 - 2ab; identical prompt colours give identical columns,
    # so exact colour ties survive the expansion
    rgb = img.reshape(-1, 3).astype(np.float64) / 255.0
    prgb = img[pts[:, 1], pts[:, 0]].astype(np.float64) / 255.0
    sq = (rgb * rgb).sum(axis=1)[:, None] + (prgb * prgb).sum(axis=1)[None, :] - 2.0 * (rgb @ prgb.T)
    colour = np.sqrt(np.maximum(sq, 0.0))
    colour *= (1.0 - cfg.alpha) / math.sqrt(3.0)

    dist = spatial + colour
    nearest = np.argmin(dist, axis=1)
    return (pol[nearest] > 0).astype(np.uint8).reshape(h, w)


def proxy_segmenter(cfg: SegmenterConfig = SegmenterConfig()) -> Segmenter:
    def seg(img, prompts):
        return segment(img, prompts, cfg)

    return seg
