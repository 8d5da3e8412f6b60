"""Procedural ellipse-blob scenes with exact ground-truth masks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import Rng, read_pgm_mask, read_ppm, write_pgm_mask, write_ppm

MIN_COLOR_SEPARATION = 60.0
MAX_TRIES = 100


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    blob_count: int = 1
    fg_color: tuple = (200, 60, 60)
    bg_color: tuple = (60, 110, 170)
    noise_amp: int = 12
    stripe_period: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ValueError("scene size must be >= 32")
        if not 1 <= self.blob_count <= 3:
            raise ValueError("blob_count must be in 1..3")
        if not 0 <= self.noise_amp <= 30:
            raise ValueError("noise_amp must be in 0..30")
        sep = math.dist(self.fg_color, self.bg_color)
        if sep < MIN_COLOR_SEPARATION:
            raise ValueError(f"fg/bg colours only {sep:.1f} apart, need >= {MIN_COLOR_SEPARATION}")


@dataclass(frozen=True)
class SceneTemplate:
    """Per-dataset appearance; each scene jitters colours around the base ones."""

    size: int = 64
    max_blobs: int = 3
    fg_color: tuple = (200, 60, 60)
    bg_color: tuple = (60, 110, 170)
    color_jitter: int = 50
    noise_amp: int = 20
    stripe_prob: float = 0.5
    stripe_period: int = 8


def _ellipse(size, cx, cy, a, b, theta):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xs - cx
    v = ys - cy
    c, s = math.cos(theta), math.sin(theta)
    return ((c * u + s * v) / a) ** 2 + ((-s * u + c * v) / b) ** 2 <= 1.0


def gen_scene(spec: SceneSpec):
    """Render ``(image, mask)`` for a scene; a pure function of ``spec``."""
    rng = Rng(spec.seed, stream=0)
    size = spec.size
    lo, hi = size / 8.0, size / 3.0
    for _ in range(MAX_TRIES):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(spec.blob_count):
            a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
            theta = rng.uniform(0.0, math.pi)
            r = max(a, b)
            cx = rng.uniform(r, size - 1 - r)
            cy = rng.uniform(r, size - 1 - r)
            mask |= _ellipse(size, cx, cy, a, b, theta)
        frac = mask.mean()
        if 0.05 <= frac <= 0.60:
            break
    else:
        raise RuntimeError(f"could not place blobs with 5-60% foreground in {MAX_TRIES} tries")

    bg = np.empty((size, size, 3), dtype=np.float64)
    bg[:] = spec.bg_color
    bg += rng.uniform(-spec.noise_amp, spec.noise_amp, (size, size, 3))
    if spec.stripe_period:
        xs = np.arange(size)
        band = np.where((xs // max(1, spec.stripe_period // 2)) % 2 == 0, 15.0, -15.0)
        bg += band[None, :, None]
    fg = np.empty((size, size, 3), dtype=np.float64)
    fg[:] = spec.fg_color
    fg += rng.uniform(-spec.noise_amp, spec.noise_amp, (size, size, 3))

    img = np.where(mask[:, :, None], fg, bg)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img, mask.astype(np.uint8)


def scene_spec(template: SceneTemplate, seed: int) -> SceneSpec:
    """Draw one scene's spec from the template, deterministically in ``seed``."""
    rng = Rng(seed, stream=1)
    jit = template.color_jitter
    for _ in range(MAX_TRIES):
        fg = tuple(int(np.clip(c + rng.integers(-jit, jit + 1), 0, 255)) for c in template.fg_color)
        bg = tuple(int(np.clip(c + rng.integers(-jit, jit + 1), 0, 255)) for c in template.bg_color)
        if math.dist(fg, bg) >= MIN_COLOR_SEPARATION:
            break
    else:
        raise RuntimeError("template colours too close to satisfy the separation constraint")
    blobs = 1 + rng.next_int(template.max_blobs)
    stripes = template.stripe_period if rng.next_float() < template.stripe_prob else None
    return SceneSpec(
        size=template.size,
        blob_count=blobs,
        fg_color=fg,
        bg_color=bg,
        noise_amp=template.noise_amp,
        stripe_period=stripes,
        seed=seed,
    )


def gen_dataset(count: int, base_seed: int = 0, template: SceneTemplate = SceneTemplate()):
    if count < 1:
        raise ValueError("count must be >= 1")
    return [gen_scene(scene_spec(template, base_seed + i)) for i in range(count)]


def write_dataset(out_dir, count: int, base_seed: int = 0, template: SceneTemplate = SceneTemplate()):
    """Write ``{i}.ppm``, ``{i}_mask.pgm`` and ``manifest.json`` into ``out_dir``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = []
    for i in range(count):
        spec = scene_spec(template, base_seed + i)
        img, mask = gen_scene(spec)
        write_ppm(out / f"{i}.ppm", img)
        write_pgm_mask(out / f"{i}_mask.pgm", mask)
        scenes.append({"index": i, **asdict(spec)})
    manifest = {"count": count, "base_seed": base_seed, "template": asdict(template), "scenes": scenes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_dataset(data_dir):
    """Load ``(image, mask)`` pairs written by :func:`write_dataset`, or any
    directory of ``{i}.ppm`` / ``{i}_mask.pgm`` pairs numbered from 0."""
    d = Path(data_dir)
    pairs = []
    i = 0
    while (d / f"{i}.ppm").exists():
        pairs.append((read_ppm(d / f"{i}.ppm"), read_pgm_mask(d / f"{i}_mask.pgm")))
        i += 1
    return pairs
