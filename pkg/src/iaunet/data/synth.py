"""Synthetic "blob cell" benchmark.

Every scene holds 3-8 elliptical cells drawn from one shape distribution.
Texture is the only identity cue: identity 0 cells have a smooth domed fill
and are the segmentation targets; identity 1.. cells (stripes, checks, ...)
are look-alike distractors with matched contours and mean brightness.
Distractors are painted first, so target cells are fully visible and the
mask is exactly the union of target ellipses.

Alongside the scenes a hard-negative pool is written: noisy background
frames (identity "background") and distractor-only frames (identity "1"...).
"""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from .io import SampleRecord, write_image, write_manifest, write_mask

TINT = np.array([0.55, 0.75, 1.0])
CELL_LEVEL = 0.62


@dataclass
class SynthConfig:
    num_images: int = 200
    image_size: int = 64
    min_cells: int = 3
    max_cells: int = 8
    identity_count: int = 2
    touching_prob: float = 0.3
    noise_sigma: float = 0.03
    pool_size: int = 0  # 0 -> num_images // 2
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise ConfigurationError("num_images must be >= 1")
        if self.image_size < 16 or self.image_size % 16:
            raise ConfigurationError("image_size must be a positive multiple of 16")
        if not 1 <= self.min_cells <= self.max_cells:
            raise ConfigurationError("need 1 <= min_cells <= max_cells")
        if self.identity_count < 2:
            raise ConfigurationError("identity_count must be >= 2 (target plus distractors)")
        if not 0.0 <= self.touching_prob <= 1.0:
            raise ConfigurationError("touching_prob must lie in [0, 1]")


@dataclass
class Cell:
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    texture: int
    phase: float

    @property
    def inner_radius(self):
        return min(self.a, self.b)

    @property
    def outer_radius(self):
        return max(self.a, self.b)


def ellipse_mask(size, cell):
    """Pixels (row y, col x) whose centre lies inside the rotated ellipse."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = x - cell.cx, y - cell.cy
    c, s = math.cos(cell.theta), math.sin(cell.theta)
    u = (dx * c + dy * s) / cell.a
    v = (-dx * s + dy * c) / cell.b
    return u * u + v * v <= 1.0


def _texture(size, cell):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = x - cell.cx, y - cell.cy
    c, s = math.cos(cell.theta), math.sin(cell.theta)
    u, v = dx * c + dy * s, -dx * s + dy * c
    if cell.texture == 0:
        r2 = (u / cell.a) ** 2 + (v / cell.b) ** 2
        return CELL_LEVEL - 0.04 + 0.08 * np.clip(1.0 - r2, 0.0, 1.0)
    if cell.texture == 1:
        return CELL_LEVEL + 0.2 * np.sign(np.sin(2 * np.pi * v / 4.0 + cell.phase))
    period = 2.0 + cell.texture
    return CELL_LEVEL + 0.2 * np.sign(np.sin(2 * np.pi * u / period + cell.phase)
                                      * np.sin(2 * np.pi * v / period))


def _background(size, rng, sigma):
    y, x = np.mgrid[0:size, 0:size] / size
    fx, fy, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
    field = 0.08 + 0.03 * np.sin(2 * np.pi * (fx * x + fy * y) + ph)
    return field + rng.normal(0.0, sigma, (size, size))


def _random_cell(rng, size, texture):
    scale = size / 64.0
    a, b = rng.uniform(6.0, 10.0, 2) * scale
    r = max(a, b)
    cx, cy = rng.uniform(r + 1, size - r - 2, 2)
    return Cell(float(cx), float(cy), float(a), float(b), float(rng.uniform(0, np.pi)),
                texture, float(rng.uniform(0, 2 * np.pi)))


def _fits(cell, size):
    r = cell.outer_radius
    return r + 1 <= cell.cx <= size - r - 2 and r + 1 <= cell.cy <= size - r - 2


def _place(rng, size, texture, placed, tries=50):
    for _ in range(tries):
        cell = _random_cell(rng, size, texture)
        if all(math.hypot(cell.cx - o.cx, cell.cy - o.cy) > cell.outer_radius + o.outer_radius + 1
               for o in placed):
            return cell
    return cell


def _touching_pair(rng, size, distractor_tex):
    """A distractor and a target whose ellipses overlap by ~2 px."""
    while True:
        d = _random_cell(rng, size, distractor_tex)
        t = _random_cell(rng, size, 0)
        d.cx, d.cy = rng.uniform(size * 0.375, size * 0.625, 2)
        dist = d.inner_radius + t.inner_radius - 2.0
        for _ in range(100):
            ang = rng.uniform(0, 2 * np.pi)
            t.cx, t.cy = d.cx + dist * math.cos(ang), d.cy + dist * math.sin(ang)
            if _fits(t, size) and _fits(d, size):
                return d, t


def scene_cells(rng, cfg):
    n = int(rng.integers(cfg.min_cells, cfg.max_cells + 1))
    n_targets = max(1, math.ceil(n / 2))
    n_distract = n - n_targets
    distract_tex = lambda: int(rng.integers(1, cfg.identity_count))  # noqa: E731
    distractors, targets = [], []
    if n_distract and rng.random() < cfg.touching_prob:
        d, t = _touching_pair(rng, cfg.image_size, distract_tex())
        distractors.append(d)
        targets.append(t)
    while len(distractors) < n_distract:
        distractors.append(_place(rng, cfg.image_size, distract_tex(), distractors + targets))
    while len(targets) < n_targets:
        targets.append(_place(rng, cfg.image_size, 0, distractors + targets))
    return distractors + targets


def render(size, cells, rng, sigma):
    """Returns (uint8 RGB image, bool target mask). Cells paint in list order."""
    value = _background(size, rng, 0.0)
    target = np.zeros((size, size), dtype=bool)
    for cell in cells:
        inside = ellipse_mask(size, cell)
        value[inside] = _texture(size, cell)[inside]
        target[inside] = cell.texture == 0
    value = value + rng.normal(0.0, sigma, value.shape)
    rgb = np.clip(value[:, :, None] * TINT[None, None, :], 0.0, 1.0)
    return np.round(rgb * 255.0).astype(np.uint8), target


def _noise_frame(rng, cfg):
    size = cfg.image_size
    value = _background(size, rng, cfg.noise_sigma)
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, size, 2)
        rad = rng.uniform(3, 9) * size / 64.0
        y, x = np.mgrid[0:size, 0:size]
        blob = (y - cy) ** 2 + (x - cx) ** 2 <= rad * rad
        value[blob] += rng.normal(0.25, 0.15, blob.sum())
    rgb = np.clip(value[:, :, None] * TINT[None, None, :], 0.0, 1.0)
    return np.round(rgb * 255.0).astype(np.uint8)


@dataclass
class SynthResult:
    manifest: Path
    pool_manifest: Path
    cells: list  # per scene: list of Cell


def generate_synthetic(cfg, out_dir):
    """Write scenes, masks, pool and manifests under ``out_dir``."""
    out = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    records, all_cells = [], []
    for i in range(cfg.num_images):
        cells = scene_cells(rng, cfg)
        image, target = render(cfg.image_size, cells, rng, cfg.noise_sigma)
        name = f"scene_{i:04d}.png"
        write_image(out / "images" / name, image)
        write_mask(out / "masks" / name, target)
        records.append(SampleRecord(out / "images" / name, out / "masks" / name, "0", ["scene"]))
        all_cells.append(cells)

    pool = []
    pool_size = cfg.pool_size or max(2, cfg.num_images // 2)
    for j in range(pool_size):
        if j % 2 == 0:
            name = f"background_{j:04d}.png"
            write_image(out / "pool" / name, _noise_frame(rng, cfg))
            pool.append(SampleRecord(out / "pool" / name, None, "background", ["background"]))
        else:
            tex = int(rng.integers(1, cfg.identity_count))
            n = int(rng.integers(cfg.min_cells, cfg.max_cells + 1))
            cells = []
            for _ in range(n):
                cells.append(_place(rng, cfg.image_size, tex, cells))
            image, _ = render(cfg.image_size, cells, rng, cfg.noise_sigma)
            name = f"adjacent_{j:04d}.png"
            write_image(out / "pool" / name, image)
            pool.append(SampleRecord(out / "pool" / name, None, str(tex), ["adjacent"]))

    manifest, pool_manifest = out / "manifest.json", out / "pool.json"
    write_manifest(manifest, records)
    write_manifest(pool_manifest, pool)
    (out / "cells.json").write_text(json.dumps(
        {"config": asdict(cfg), "scenes": [[asdict(c) for c in cells] for cells in all_cells]},
        indent=1) + "\n")
    return SynthResult(manifest, pool_manifest, all_cells)


def load_cells(out_dir):
    data = json.loads((Path(out_dir) / "cells.json").read_text())
    return [[Cell(**c) for c in cells] for cells in data["scenes"]]
