"""Procedural shapes corpus: two coloured shapes in a spatial relation, with captions.

Shapes are rendered on a 32x32 canvas with 12x12 footprints aligned to a
4-pixel grid, so the same shape always produces the same set of cell
patterns wherever it is placed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .images import write_image

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
SHAPES = ("square", "circle", "triangle")
# (row, col) of the top-left 4px cell of object A then object B
RELATIONS = {
    "above": ((1, 2), (4, 2)),
    "below": ((4, 2), (1, 2)),
    "left of": ((2, 1), (2, 4)),
    "right of": ((2, 4), (2, 1)),
}
CANVAS = 32
CELL = 4
FOOT = 12


@dataclass(frozen=True)
class Scene:
    color_a: str
    shape_a: str
    relation: str
    color_b: str
    shape_b: str

    @property
    def caption(self) -> str:
        return f"a {self.color_a} {self.shape_a} {self.relation} a {self.color_b} {self.shape_b}"


def _mask(shape: str) -> np.ndarray:
    yy, xx = np.mgrid[0:FOOT, 0:FOOT] + 0.5
    if shape == "square":
        return np.ones((FOOT, FOOT), dtype=bool)
    if shape == "circle":
        return (yy - FOOT / 2) ** 2 + (xx - FOOT / 2) ** 2 <= (FOOT / 2) ** 2
    if shape == "triangle":
        # apex at top centre, base along the bottom row
        return np.abs(xx - FOOT / 2) <= yy / 2
    raise ValueError(f"unknown shape {shape!r}")


def render(scene: Scene, size: int = CANVAS) -> np.ndarray:
    img = np.zeros((3, CANVAS, CANVAS), dtype=np.float32)
    pos_a, pos_b = RELATIONS[scene.relation]
    for (row, col), shape, color in ((pos_a, scene.shape_a, scene.color_a),
                                     (pos_b, scene.shape_b, scene.color_b)):
        y, x = row * CELL, col * CELL
        m = _mask(shape)
        for ch, val in enumerate(COLORS[color]):
            img[ch, y:y + FOOT, x:x + FOOT][m] = val
    if size != CANVAS:
        if size % CANVAS:
            raise ValueError(f"size must be a multiple of {CANVAS}")
        k = size // CANVAS
        img = img.repeat(k, axis=1).repeat(k, axis=2)
    return img


def all_scenes() -> list[Scene]:
    objs = list(itertools.product(COLORS, SHAPES))
    out = []
    for (ca, sa), rel, (cb, sb) in itertools.product(objs, RELATIONS, objs):
        if (ca, sa) != (cb, sb):
            out.append(Scene(ca, sa, rel, cb, sb))
    return out


def sample_scenes(n: int, seed: int, skip: int = 0) -> list[Scene]:
    """``n`` distinct scenes from a seeded shuffle, after skipping the first ``skip``."""
    scenes = all_scenes()
    order = np.random.default_rng(seed).permutation(len(scenes))
    if skip + n > len(scenes):
        raise ValueError(f"only {len(scenes)} distinct scenes available")
    return [scenes[i] for i in order[skip:skip + n]]


def generate_pairs(n: int, seed: int = 0, size: int = CANVAS, skip: int = 0) -> list[tuple[np.ndarray, str]]:
    return [(render(s, size), s.caption) for s in sample_scenes(n, seed, skip)]


def write_corpus(out_dir: str | Path, n: int, seed: int = 0, size: int = CANVAS,
                 skip: int = 0, source: str = "in-domain", fmt: str = "ppm") -> Path:
    """Write images, a record file and a one-source manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, caption) in enumerate(generate_pairs(n, seed, size, skip)):
        rel = f"images/{i:05d}.{fmt}"
        write_image(out / rel, img)
        lines.append(f"{rel}\t{caption}\t{source}")
    records = out / f"{source}.tsv"
    records.write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = out / "manifest.tsv"
    manifest.write_text(f"{source}\t{records.name}\t{n}\n", encoding="utf-8")
    return manifest
