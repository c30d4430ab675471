"""Anchor pyramid generation.

Each level tiles a ``ceil(input_size / stride)``-square grid with one anchor
per (scale, aspect ratio) pair at every cell center ``((j + 0.5) * S,
(i + 0.5) * S)``. An anchor of scale ``s`` and ratio ``r`` (height / width)
has width ``s / sqrt(r)`` and height ``s * sqrt(r)`` so that its square-root
area is exactly ``s``.

With the default six levels (strides 4..128, scales ``2S`` and ``2*sqrt(2)*S``,
ratio 1.25) the scales run from 8 to ~362 pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

LEVEL_NAMES = ("P2", "P3", "P4", "P5", "P6", "P7")


@dataclass(frozen=True)
class LevelSpec:
    name: str
    stride: float
    scales: tuple[float, ...]
    aspect_ratios: tuple[float, ...] = (1.25,)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "aspect_ratios", tuple(float(r) for r in self.aspect_ratios))
        if self.stride <= 0:
            raise ValueError(f"level {self.name}: stride must be positive")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"level {self.name}: scales must be non-empty and positive")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError(f"level {self.name}: aspect ratios must be non-empty and positive")

    @property
    def anchors_per_location(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    @classmethod
    def default(cls, name: str, stride: float) -> "LevelSpec":
        return cls(name, stride, (2.0 * stride, 2.0 * math.sqrt(2.0) * stride))


def default_levels() -> tuple[LevelSpec, ...]:
    return tuple(LevelSpec.default(name, 2.0**k) for name, k in zip(LEVEL_NAMES, range(2, 8)))


@dataclass(frozen=True)
class PyramidConfig:
    input_size: int = 1024
    levels: tuple[LevelSpec, ...] = field(default_factory=default_levels)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if self.input_size <= 0:
            raise ValueError(f"input_size must be positive, got {self.input_size}")
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        names = [lv.name for lv in self.levels]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate level names: {names}")
        strides = [lv.stride for lv in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"level strides must be strictly increasing: {strides}")

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "levels": [
                {
                    "name": lv.name,
                    "stride": lv.stride,
                    "scales": list(lv.scales),
                    "aspect_ratios": list(lv.aspect_ratios),
                }
                for lv in self.levels
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PyramidConfig":
        unknown = set(d) - {"input_size", "levels"}
        if unknown:
            raise ValueError(f"unknown pyramid keys: {sorted(unknown)}")
        input_size = int(d.get("input_size", 1024))
        if "levels" not in d:
            return cls(input_size)
        levels = []
        for item in d["levels"]:
            extra = set(item) - {"name", "stride", "scales", "aspect_ratios"}
            if extra:
                raise ValueError(f"unknown level keys: {sorted(extra)}")
            stride = float(item["stride"])
            scales = item.get("scales", (2.0 * stride, 2.0 * math.sqrt(2.0) * stride))
            levels.append(LevelSpec(item["name"], stride, scales, item.get("aspect_ratios", (1.25,))))
        return cls(input_size, tuple(levels))


@dataclass(frozen=True, eq=False)
class AnchorPyramid:
    """Flat anchor set in level-major, row-major, scale-then-ratio order.

    Attributes:
        config: the generating configuration.
        boxes: ``(N, 4)`` corner-form anchors.
        level: ``(N,)`` index into ``config.levels``.
        grid: ``(N, 2)`` (row, col) of the anchor's grid cell.
        scale: ``(N,)`` nominal scale (square-root area) of each anchor.
    """

    config: PyramidConfig
    boxes: np.ndarray
    level: np.ndarray
    grid: np.ndarray
    scale: np.ndarray

    @property
    def level_names(self) -> tuple[str, ...]:
        return tuple(lv.name for lv in self.config.levels)

    def __len__(self) -> int:
        return len(self.boxes)

    def level_index(self, name: str) -> int:
        try:
            return self.level_names.index(name)
        except ValueError:
            raise KeyError(f"unknown pyramid level {name!r}; have {list(self.level_names)}") from None

    def level_mask(self, names: Sequence[str]) -> np.ndarray:
        """Boolean mask of anchors whose level is in ``names``."""
        idx = [self.level_index(n) for n in names]
        return np.isin(self.level, np.asarray(idx, dtype=self.level.dtype))

    def level_counts(self) -> dict[str, int]:
        counts = np.bincount(self.level, minlength=len(self.config.levels))
        return {name: int(c) for name, c in zip(self.level_names, counts)}


def generate(config: PyramidConfig) -> AnchorPyramid:
    if config.input_size <= 0:
        raise ValueError("input_size must be positive")
    if not config.levels:
        raise ValueError("pyramid needs at least one level")
    boxes, level, grid, scale = [], [], [], []
    for li, lv in enumerate(config.levels):
        n = math.ceil(config.input_size / lv.stride)
        # per-location shapes, scale-major then ratio
        shapes = [
            (s / math.sqrt(r), s * math.sqrt(r), s) for s in lv.scales for r in lv.aspect_ratios
        ]
        ws = np.array([w for w, _, _ in shapes])
        hs = np.array([h for _, h, _ in shapes])
        ss = np.array([s for _, _, s in shapes])
        rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        rows = rows.reshape(-1, 1)
        cols = cols.reshape(-1, 1)
        cx = (cols + 0.5) * lv.stride
        cy = (rows + 0.5) * lv.stride
        b = np.stack([cx - ws / 2, cy - hs / 2, cx + ws / 2, cy + hs / 2], axis=-1)
        a = len(shapes)
        boxes.append(b.reshape(-1, 4))
        level.append(np.full(n * n * a, li, dtype=np.int32))
        grid.append(np.repeat(np.concatenate([rows, cols], axis=1), a, axis=0))
        scale.append(np.tile(ss, n * n))
    pyr = AnchorPyramid(
        config,
        np.concatenate(boxes),
        np.concatenate(level),
        np.concatenate(grid).astype(np.int32),
        np.concatenate(scale),
    )
    for arr in (pyr.boxes, pyr.level, pyr.grid, pyr.scale):
        arr.flags.writeable = False
    return pyr


def level_population_report(
    pyramid: AnchorPyramid, split: Mapping[str, Sequence[str]]
) -> dict[str, float]:
    """Fraction of all anchors falling in each named group of levels.

    Args:
        pyramid: generated anchors.
        split: group name -> level names; must partition the pyramid's levels.

    Raises:
        KeyError: a level name in ``split`` does not exist in the pyramid.
        ValueError: ``split`` does not cover every level exactly once.
    """
    counts = pyramid.level_counts()
    seen: list[str] = []
    for names in split.values():
        for n in names:
            if n not in counts:
                raise KeyError(f"unknown pyramid level {n!r}")
            seen.append(n)
    if sorted(seen) != sorted(counts):
        raise ValueError(f"split must partition levels {sorted(counts)}, got {sorted(seen)}")
    total = sum(counts.values())
    return {group: sum(counts[n] for n in names) / total for group, names in split.items()}
