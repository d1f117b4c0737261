"""Synthetic paired scenes for desk-scale experiments.

Scenes are rectangles ("buildings") on a textured background. The
pre-event image paints every building in the style's intact color; the
post-event image recolors each building according to its damage level, so a
small network can learn localization from either image and damage level
from the post appearance. Two style palettes provide the disjoint "domains"
used by cross-dataset protocol runs, and a skewed generator provides the
majority/minority fixture used to probe class-imbalance behaviour.

All geometry and noise comes from one seeded stream, so every fixture is a
pure function of its arguments.
"""

from __future__ import annotations

import numpy as np

from .dataio import BuildingPolygon, InMemoryDataset, MaskPair, Sample
from .rng import Rng

LEVEL_NAMES = {1: "no-damage", 2: "minor-damage", 3: "major-damage", 4: "destroyed"}

STYLE_A = {
    "bg": (0.30, 0.42, 0.52),
    "bg_slope": 0.10,
    "intact": (0.78, 0.77, 0.80),
    "post": {
        1: (0.20, 0.70, 0.30),
        2: (0.85, 0.80, 0.20),
        3: (0.90, 0.45, 0.10),
        4: (0.45, 0.06, 0.08),
    },
    "noise": 0.03,
}

STYLE_B = {
    "bg": (0.55, 0.50, 0.38),
    "bg_slope": -0.08,
    "intact": (0.60, 0.62, 0.70),
    "post": {
        1: (0.30, 0.60, 0.55),
        2: (0.75, 0.65, 0.45),
        3: (0.80, 0.35, 0.35),
        4: (0.25, 0.12, 0.20),
    },
    "noise": 0.05,
}


def _background(rng: Rng, size: int, style: dict) -> np.ndarray:
    base = np.asarray(style["bg"], dtype=np.float64).reshape(3, 1, 1)
    ramp = np.linspace(0.0, style["bg_slope"], size)
    img = base + ramp[None, None, :] + ramp[None, :, None] * 0.5
    img += rng.uniform((3, size, size), -style["noise"], style["noise"])
    return np.clip(img, 0.0, 1.0)


def _paint(img: np.ndarray, rect: tuple[int, int, int, int], color, rng: Rng, noise: float):
    x0, y0, bw, bh = rect
    patch = np.asarray(color, dtype=np.float64).reshape(3, 1, 1) + rng.uniform(
        (3, bh, bw), -noise, noise
    )
    img[:, y0 : y0 + bh, x0 : x0 + bw] = np.clip(patch, 0.0, 1.0)


def render_scene(
    rng: Rng, size: int, buildings: list[tuple[tuple[int, int, int, int], int]], style: dict
) -> Sample:
    """Render one pre/post pair plus masks from (rect, damage level) entries."""
    pre = _background(rng, size, style)
    post = _background(rng, size, style)
    loc = np.zeros((size, size), dtype=np.uint8)
    dmg = np.zeros((size, size), dtype=np.uint8)
    for rect, level in buildings:
        x0, y0, bw, bh = rect
        _paint(pre, rect, style["intact"], rng, style["noise"])
        _paint(post, rect, style["post"][level], rng, style["noise"])
        loc[y0 : y0 + bh, x0 : x0 + bw] = 1
        dmg[y0 : y0 + bh, x0 : x0 + bw] = level
    masks = MaskPair(loc=loc, dmg=dmg)
    masks.validate()
    return Sample("", pre, post, masks)


def building_polygons(buildings) -> list[BuildingPolygon]:
    """The same rectangles as label-file polygons (for pipeline round-trips)."""
    polys = []
    for (x0, y0, bw, bh), level in buildings:
        ring = [(x0, y0), (x0 + bw, y0), (x0 + bw, y0 + bh), (x0, y0 + bh)]
        polys.append(BuildingPolygon([(float(x), float(y)) for x, y in ring],
                                     LEVEL_NAMES[level]))
    return polys


def _grid_rects(rng: Rng, size: int, cells: int, min_side: int, max_side: int):
    """One random rectangle per grid cell, kept off the cell borders."""
    cell = size // cells
    rects = []
    for gy in range(cells):
        for gx in range(cells):
            bw = min_side + rng.randint(max_side - min_side + 1)
            bh = min_side + rng.randint(max_side - min_side + 1)
            bw = min(bw, cell - 2)
            bh = min(bh, cell - 2)
            x0 = gx * cell + 1 + rng.randint(cell - bw - 1)
            y0 = gy * cell + 1 + rng.randint(cell - bh - 1)
            rects.append((x0, y0, bw, bh))
    return rects


def make_overfit_fixture(seed: int, count: int = 4, size: int = 32) -> InMemoryDataset:
    """Small fixture with every damage level present; used for overfit runs."""
    rng = Rng(seed).derive(101)
    samples = []
    level_cycle = 0
    for i in range(count):
        rects = _grid_rects(rng, size, cells=2, min_side=6, max_side=11)
        buildings = []
        for rect in rects:
            level = 1 + level_cycle % 4
            level_cycle += 1
            buildings.append((rect, level))
        sample = render_scene(rng, size, buildings, STYLE_A)
        sample.sample_id = f"overfit_{i:02d}"
        samples.append(sample)
    return InMemoryDataset(samples)


def make_imbalance_fixture(
    seed: int,
    train_count: int = 6,
    test_count: int = 6,
    size: int = 32,
    majority_level: int = 1,
    minority_level: int = 3,
) -> tuple[InMemoryDataset, InMemoryDataset]:
    """Two-class fixture with a ~20:1 building-pixel skew.

    Every scene holds four large majority buildings and one small minority
    building whose post color is deliberately close to the majority's, so
    that a short unweighted training run tends to underfit it.
    """
    rng = Rng(seed).derive(202)
    style = dict(STYLE_A)
    style["post"] = dict(STYLE_A["post"])
    # nudge the minority color toward the majority color to make it hard
    maj = np.asarray(style["post"][majority_level])
    hard = 0.62 * maj + 0.38 * np.asarray(style["post"][minority_level])
    style["post"][minority_level] = tuple(hard.tolist())

    def scene(tag: str, index: int) -> Sample:
        buildings = []
        big = _grid_rects(rng, size, cells=2, min_side=9, max_side=11)
        for rect in big:
            buildings.append((rect, majority_level))
        # one small minority building over the center seam, ~1/20 of the pixels
        bw = 4 + rng.randint(2)
        bh = 4
        x0 = size // 2 - bw // 2 - 1 + rng.randint(3)
        y0 = size // 2 - bh // 2 - 1 + rng.randint(3)
        buildings.append(((x0, y0, bw, bh), minority_level))
        sample = render_scene(rng, size, buildings, style)
        sample.sample_id = f"imb_{tag}_{index:02d}"
        return sample

    train = InMemoryDataset([scene("train", i) for i in range(train_count)])
    test = InMemoryDataset([scene("test", i) for i in range(test_count)])
    return train, test


def make_domain_datasets(
    seed: int, train_count: int = 8, test_count: int = 6, size: int = 32
) -> dict[str, InMemoryDataset]:
    """Two visually disjoint domains: train/test for A, test for B."""

    def build(tag: str, count: int, style: dict, rng: Rng) -> InMemoryDataset:
        samples = []
        level_cycle = 0
        for i in range(count):
            rects = _grid_rects(rng, size, cells=2, min_side=6, max_side=11)
            buildings = []
            for rect in rects:
                level = 1 + level_cycle % 4
                level_cycle += 1
                buildings.append((rect, level))
            sample = render_scene(rng, size, buildings, style)
            sample.sample_id = f"{tag}_{i:02d}"
            samples.append(sample)
        return InMemoryDataset(samples)

    rng_a = Rng(seed).derive(303)
    rng_b = Rng(seed).derive(404)
    return {
        "a_train": build("a_train", train_count, STYLE_A, rng_a),
        "a_test": build("a_test", test_count, STYLE_A, rng_a),
        "b_test": build("b_test", test_count, STYLE_B, rng_b),
    }
