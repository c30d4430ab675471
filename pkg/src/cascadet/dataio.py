"""Scenes: WIDER FACE ground-truth parsing, JSON-lines interchange, seeded
synthetic generation and box-level geometric augmentation.

Scene JSON-lines schema (one object per line, keys in this order)::

    {"image_id": str, "width": int|float, "height": int|float,
     "faces": [[x_min, y_min, x_max, y_max], ...],
     "flags": [[blur, expression, illumination, invalid, occlusion, pose], ...]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping

import numpy as np

from .geometry import as_boxes, hflip_boxes, iou_matrix

FLAG_NAMES = ("blur", "expression", "illumination", "invalid", "occlusion", "pose")
INVALID = FLAG_NAMES.index("invalid")


@dataclass(eq=False)
class Scene:
    image_id: str
    width: float
    height: float
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    flags: np.ndarray | None = None

    def __post_init__(self):
        self.faces = as_boxes(self.faces)
        if self.flags is None:
            self.flags = np.zeros((len(self.faces), len(FLAG_NAMES)), dtype=np.int64)
        self.flags = np.asarray(self.flags, dtype=np.int64).reshape(-1, len(FLAG_NAMES))
        if len(self.flags) != len(self.faces):
            raise ValueError(f"{self.image_id}: {len(self.faces)} faces but {len(self.flags)} flag rows")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: image size must be positive")
        if np.any(self.faces[:, 2] < self.faces[:, 0]) or np.any(self.faces[:, 3] < self.faces[:, 1]):
            raise ValueError(f"{self.image_id}: face with negative extent")

    @property
    def ignore(self) -> np.ndarray:
        """Mask of faces flagged invalid."""
        return self.flags[:, INVALID] != 0

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.faces, other.faces)
            and np.array_equal(self.flags, other.flags)
        )

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": _num(self.width),
            "height": _num(self.height),
            "faces": [[_num(v) for v in row] for row in self.faces],
            "flags": [[int(v) for v in row] for row in self.flags],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scene":
        unknown = set(d) - {"image_id", "width", "height", "faces", "flags"}
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        flags = d.get("flags")
        return cls(
            str(d["image_id"]),
            d["width"],
            d["height"],
            np.array(d.get("faces", []), dtype=np.float64),
            None if flags is None else np.array(flags, dtype=np.int64),
        )


def _num(v):
    v = float(v)
    return int(v) if v.is_integer() else v


def write_scenes(scenes: Iterable[Scene], fh: IO[str]) -> None:
    for s in scenes:
        fh.write(json.dumps(s.to_dict()) + "\n")


def read_scenes(fh: IO[str]) -> list[Scene]:
    out = []
    for lineno, line in enumerate(fh, 1):
        if not line.strip():
            continue
        try:
            out.append(Scene.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"scene line {lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# WIDER FACE ground truth


class WiderParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def _face_fields(text: str) -> list[int] | None:
    parts = text.split()
    if len(parts) not in (4, 4 + len(FLAG_NAMES)):
        return None
    try:
        return [int(p) for p in parts]
    except ValueError:
        return None


def parse_wider(
    stream: Iterable[str], image_sizes: Mapping[str, tuple[float, float]] | None = None
) -> list[Scene]:
    """Parse a WIDER FACE ``*_bbx_gt.txt`` stream.

    Records are: image path line, face count line, then one line per face of
    ``x y w h blur expression illumination invalid occlusion pose`` (the
    six flags may be absent). A zero-count record may be followed by a single
    all-zero placeholder line, which is skipped.

    The annotation file carries no image sizes. They come from
    ``image_sizes`` when given, otherwise from the faces' extent (at least 1).

    Raises:
        WiderParseError: count mismatch, malformed field, bad count line,
            negative box size or premature end of stream, with the 1-based
            line number.
    """
    lines = [ln.rstrip("\r\n") for ln in stream]
    n = len(lines)
    scenes: list[Scene] = []
    i = 0
    while i < n:
        if not lines[i].strip():
            i += 1
            continue
        name = lines[i].strip()
        name_line = i + 1
        if _face_fields(name) is not None or _is_int(name):
            raise WiderParseError(name_line, f"expected image path, got {name!r} (face count mismatch?)")
        i += 1
        if i >= n:
            raise WiderParseError(name_line, f"unexpected end of file after image path {name!r}")
        if not _is_int(lines[i].strip()):
            raise WiderParseError(i + 1, f"malformed face count {lines[i].strip()!r}")
        count = int(lines[i].strip())
        if count < 0:
            raise WiderParseError(i + 1, f"negative face count {count}")
        i += 1
        faces, flags = [], []
        if count == 0:
            if i < n and (vals := _face_fields(lines[i])) is not None and not any(vals):
                i += 1
        for k in range(count):
            if i >= n:
                raise WiderParseError(
                    n, f"unexpected end of file: {name!r} declares {count} faces, found {k}"
                )
            vals = _face_fields(lines[i])
            if vals is None:
                if _looks_like_path(lines[i]):
                    raise WiderParseError(
                        i + 1, f"face count mismatch: {name!r} declares {count} faces, found {k}"
                    )
                raise WiderParseError(i + 1, f"malformed face record {lines[i].strip()!r}")
            x, y, w, h = vals[:4]
            if w < 0 or h < 0:
                raise WiderParseError(i + 1, f"negative box size in {lines[i].strip()!r}")
            faces.append([x, y, x + w, y + h])
            flags.append(vals[4:] if len(vals) > 4 else [0] * len(FLAG_NAMES))
            i += 1
        boxes = np.array(faces, dtype=np.float64).reshape(-1, 4)
        if image_sizes is not None and name in image_sizes:
            width, height = image_sizes[name]
        else:
            width = max(1.0, float(boxes[:, 2].max())) if len(boxes) else 1.0
            height = max(1.0, float(boxes[:, 3].max())) if len(boxes) else 1.0
        scenes.append(Scene(name, width, height, boxes, np.array(flags, dtype=np.int64)))
    return scenes


def _is_int(text: str) -> bool:
    try:
        int(text)
    except ValueError:
        return False
    return True


def _looks_like_path(text: str) -> bool:
    t = text.strip()
    return bool(t) and len(t.split()) == 1 and not _is_int(t)


def write_wider(scenes: Iterable[Scene], fh: IO[str]) -> None:
    """Serialize scenes in the WIDER ground-truth layout (integer pixels)."""
    for s in scenes:
        fh.write(f"{s.image_id}\n{len(s.faces)}\n")
        if len(s.faces) == 0:
            fh.write("0 0 0 0 0 0 0 0 0 0 \n")
        for box, fl in zip(s.faces, s.flags):
            x, y = int(round(box[0])), int(round(box[1]))
            w, h = int(round(box[2] - box[0])), int(round(box[3] - box[1]))
            fh.write(" ".join(str(v) for v in (x, y, w, h, *map(int, fl))) + " \n")


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthParams:
    image_size: int = 1024
    min_faces: int = 5
    max_faces: int = 25
    min_scale: float = 8.0
    max_scale: float = 362.0
    aspect_ratio: float = 1.25
    aspect_sigma: float = 0.15
    tail_fraction: float = 0.1
    tail_max_ratio: float = 3.0
    max_overlap: float = 0.1
    max_tries: int = 50

    def __post_init__(self):
        if not 0 < self.min_scale <= self.max_scale:
            raise ValueError("need 0 < min_scale <= max_scale")
        if not 0 <= self.min_faces <= self.max_faces:
            raise ValueError("need 0 <= min_faces <= max_faces")
        if not 0.0 <= self.tail_fraction <= 1.0:
            raise ValueError("tail_fraction must lie in [0, 1]")
        if self.tail_max_ratio <= 2.0:
            raise ValueError("tail_max_ratio must exceed 2")


def sample_face_shapes(rng: np.random.Generator, n: int, params: SynthParams):
    """Draw ``n`` (width, height) pairs.

    Scales (square-root area) are log-uniform on ``[min_scale, max_scale]``.
    Aspect ratios (height / width) are log-normal around ``aspect_ratio``
    truncated to ``[0.5, 2]``; a ``tail_fraction`` share is instead drawn
    log-uniformly from the extreme bands ``(2, tail_max]`` or
    ``[1 / tail_max, 0.5)`` with equal probability.
    """
    scales = np.exp(rng.uniform(math.log(params.min_scale), math.log(params.max_scale), n))
    tail = rng.random(n) < params.tail_fraction
    ratios = np.empty(n)
    core = np.exp(rng.normal(math.log(params.aspect_ratio), params.aspect_sigma, n))
    ratios[:] = np.clip(core, 0.5, 2.0)
    extreme = np.exp(rng.uniform(math.log(2.0), math.log(params.tail_max_ratio), n))
    extreme = np.where(rng.random(n) < 0.5, extreme, 1.0 / extreme)
    ratios[tail] = extreme[tail]
    widths = scales / np.sqrt(ratios)
    heights = scales * np.sqrt(ratios)
    return widths, heights


def synth_scenes(n: int, seed: int, params: SynthParams = SynthParams()) -> list[Scene]:
    """Generate ``n`` square scenes of ``params.image_size`` pixels.

    Faces are placed uniformly inside the image, rejecting placements that
    overlap an earlier face above ``max_overlap`` IoU.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    size = float(params.image_size)
    scenes = []
    for k in range(n):
        count = int(rng.integers(params.min_faces, params.max_faces + 1))
        widths, heights = sample_face_shapes(rng, count, params)
        faces: list[list[float]] = []
        for w, h in zip(widths, heights):
            w, h = min(w, size), min(h, size)
            for _ in range(params.max_tries):
                x0 = rng.uniform(0.0, size - w)
                y0 = rng.uniform(0.0, size - h)
                cand = [x0, y0, x0 + w, y0 + h]
                if not faces or iou_matrix(np.array([cand]), np.array(faces)).max() <= params.max_overlap:
                    faces.append(cand)
                    break
        scenes.append(Scene(f"synth_{seed}_{k:05d}", size, size, np.array(faces)))
    return scenes


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    expand_range: tuple[float, float] = (1.0, 2.0)
    crop_scale_range: tuple[float, float] = (0.5, 1.0)
    flip_probability: float = 0.5
    output_size: int = 1024

    def __post_init__(self):
        lo, hi = self.expand_range
        if not 1.0 <= lo <= hi:
            raise ValueError("expand_range must satisfy 1 <= lo <= hi")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_scale_range must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")
        if self.output_size <= 0:
            raise ValueError("output_size must be positive")


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw of the augmentation randomness."""

    expand: float
    offset: tuple[float, float]
    crop: tuple[float, float, float]  # x0, y0, side
    flip: bool


def sample_augment(scene: Scene, config: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    """Draw augmentation parameters in a fixed order.

    Order: expansion factor, canvas offset (x, y), crop scale for the second
    candidate, candidate choice, crop origin (x, y), flip.
    """
    e = float(rng.uniform(*config.expand_range))
    cw, ch = scene.width * e, scene.height * e
    off = (float(rng.uniform(0.0, cw - scene.width)), float(rng.uniform(0.0, ch - scene.height)))
    short = min(cw, ch)
    scaled = float(rng.uniform(*config.crop_scale_range)) * short
    side = short if rng.random() < 0.5 else scaled
    crop = (float(rng.uniform(0.0, cw - side)), float(rng.uniform(0.0, ch - side)), side)
    flip = bool(rng.random() < config.flip_probability)
    return AugmentParams(e, off, crop, flip)


def apply_augment(scene: Scene, params: AugmentParams, output_size: float) -> Scene:
    """Expand, crop, flip and resize the boxes of ``scene``.

    Faces whose centers fall outside the crop are dropped; the rest are
    clipped to it.
    """
    boxes = scene.faces + np.array([params.offset[0], params.offset[1]] * 2)
    x0, y0, side = params.crop
    cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    keep = (cx >= x0) & (cx <= x0 + side) & (cy >= y0) & (cy <= y0 + side)
    boxes = boxes[keep] - np.array([x0, y0, x0, y0])
    boxes = np.clip(boxes, 0.0, side)
    if params.flip:
        boxes = hflip_boxes(boxes, side)
    boxes = boxes * (output_size / side)
    return Scene(scene.image_id, float(output_size), float(output_size), boxes, scene.flags[keep])


def augment(scene: Scene, config: AugmentConfig = AugmentConfig(), seed: int = 0) -> Scene:
    rng = np.random.default_rng(seed)
    return apply_augment(scene, sample_augment(scene, config, rng), config.output_size)
