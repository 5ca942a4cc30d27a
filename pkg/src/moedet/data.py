"""Synthetic two-domain shape-detection scenes and their binary file format.

Domain "A" has one or two large dark shapes on a bright, clean background;
domain "B" has two to four small bright shapes on a dark background with
line clutter and heavier noise. Classes are the four shape kinds.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box, iou

CLASSES = ("disc", "square", "triangle", "cross")
MAGIC = b"MOED"
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    """Raised when a dataset file is corrupt, truncated or of the wrong version."""


@dataclass(frozen=True)
class DomainSpec:
    name: str
    size_range: tuple[int, int]
    count_range: tuple[int, int]
    background: tuple[float, float]
    noise: float
    object_level: tuple[float, float]
    clutter: int = 0
    classes: tuple[str, ...] = CLASSES


def domain_spec(name: str, image_size: int = 64) -> DomainSpec:
    if name == "A":
        return DomainSpec("A", (6, image_size // 2), (1, 2), (0.6, 0.9), 0.02, (0.0, 0.35))
    if name == "B":
        return DomainSpec("B", (3, image_size // 4), (2, 4), (0.05, 0.25), 0.06, (0.6, 1.0), clutter=10)
    raise ValueError(f"unknown domain {name!r} (expected 'A' or 'B')")


@dataclass(eq=False)
class Scene:
    image: np.ndarray  # (3, S, S) float32 in [0, 1]
    objects: list[tuple[Box, int]] = field(default_factory=list)
    domain: str = ""

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image)
                and [(tuple(b), c) for b, c in self.objects] == [(tuple(b), c) for b, c in other.objects])


def _shape_mask(kind: int, x0: int, y0: int, m: int, size: int) -> np.ndarray:
    v, u = np.mgrid[0:size, 0:size] + 0.5
    if kind == 0:
        r = m / 2.0
        return (u - x0 - r) ** 2 + (v - y0 - r) ** 2 <= r * r
    if kind == 1:
        return (u > x0) & (u < x0 + m) & (v > y0) & (v < y0 + m)
    if kind == 2:
        # apex top-centre, base along the bottom edge
        rel_y = (v - y0) / m
        half = 0.5 * m * rel_y
        cx = x0 + 0.5 * m
        return (rel_y >= 0) & (rel_y <= 1) & (np.abs(u - cx) <= half)
    t = max(1.0, round(m / 3))
    lo = (m - t) / 2.0
    inside = (u > x0) & (u < x0 + m) & (v > y0) & (v < y0 + m)
    bar_h = (v > y0 + lo) & (v < y0 + lo + t)
    bar_v = (u > x0 + lo) & (u < x0 + lo + t)
    return inside & (bar_h | bar_v)


def _tight_box(mask: np.ndarray) -> Box | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def generate_scene(domain: DomainSpec, seed: int, index: int, image_size: int = 64) -> Scene:
    """Render one scene; a pure function of (domain, seed, index)."""
    rng = np.random.default_rng([seed, index, ord(domain.name[0])])
    S = image_size
    bg_color = rng.uniform(*domain.background, size=3)
    image = np.broadcast_to(bg_color[:, None, None], (3, S, S)).copy()
    for _ in range(domain.clutter):
        level = rng.uniform(0.1, 0.3)
        length = int(rng.integers(3, 9))
        x, y = (int(v) for v in rng.integers(0, S - length, size=2))
        if rng.random() < 0.5:
            image[:, y, x:x + length] += level
        else:
            image[:, y:y + length, x] += level
    count = int(rng.integers(domain.count_range[0], domain.count_range[1] + 1))
    lo, hi = domain.size_range
    objects: list[tuple[Box, int]] = []
    for _ in range(count):
        for _attempt in range(50):
            kind = int(rng.integers(len(domain.classes)))
            m = int(rng.integers(lo, hi + 1))
            x0, y0 = (int(v) for v in rng.integers(0, S - m + 1, size=2))
            mask = _shape_mask(kind, x0, y0, m, S)
            box = _tight_box(mask)
            if box is None or min(box.width, box.height) < 3 or max(box.width, box.height) < lo:
                continue
            if any(iou(box, other) > 0.1 for other, _ in objects):
                continue
            color = rng.uniform(*domain.object_level, size=3)
            image[:, mask] = color[:, None]
            objects.append((box, kind))
            break
    if domain.noise > 0:
        image += rng.normal(0.0, domain.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Scene(image, objects, domain.name)


def generate_dataset(domain: DomainSpec, seed: int, count: int, image_size: int = 64, start: int = 0) -> list[Scene]:
    return [generate_scene(domain, seed, start + k, image_size) for k in range(count)]


# ------------------------------------------------------------------ file format

_HEADER = struct.Struct("<4sII")
_DIMS = struct.Struct("<III")
_COUNT = struct.Struct("<I")
_OBJECT = struct.Struct("<ffffi")


def _encode_record(scene: Scene) -> bytes:
    image = np.ascontiguousarray(scene.image, dtype="<f4")
    if image.ndim != 3:
        raise ValueError(f"scene image must be (C, H, W), got {image.shape}")
    parts = [_DIMS.pack(*image.shape), image.tobytes(), _COUNT.pack(len(scene.objects))]
    parts += [_OBJECT.pack(*box, int(cls)) for box, cls in scene.objects]
    body = b"".join(parts)
    return body + _COUNT.pack(zlib.crc32(body))


def write_dataset(scenes: Sequence[Scene], path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(scenes)))
        for scene in scenes:
            fh.write(_encode_record(scene))


def _take(buf: memoryview, pos: int, n: int, record: int) -> bytes:
    if pos + n > len(buf):
        raise DataFormatError(f"record {record}: truncated file")
    return bytes(buf[pos:pos + n])


def read_dataset(path) -> list[Scene]:
    buf = memoryview(Path(path).read_bytes())
    if len(buf) < _HEADER.size:
        raise DataFormatError("header: file too short")
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DataFormatError(f"header: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"header: unsupported format version {version}")
    pos = _HEADER.size
    scenes = []
    for rec in range(count):
        start = pos
        c, h, w = _DIMS.unpack(_take(buf, pos, _DIMS.size, rec))
        pos += _DIMS.size
        n_px = c * h * w
        pixels = np.frombuffer(_take(buf, pos, 4 * n_px, rec), dtype="<f4").reshape(c, h, w)
        pos += 4 * n_px
        (n_obj,) = _COUNT.unpack(_take(buf, pos, _COUNT.size, rec))
        pos += _COUNT.size
        raw = _take(buf, pos, _OBJECT.size * n_obj, rec)
        pos += _OBJECT.size * n_obj
        (checksum,) = _COUNT.unpack(_take(buf, pos, _COUNT.size, rec))
        if zlib.crc32(bytes(buf[start:pos])) != checksum:
            raise DataFormatError(f"record {rec}: checksum mismatch")
        pos += _COUNT.size
        objects = []
        for k in range(n_obj):
            x1, y1, x2, y2, cls = _OBJECT.unpack_from(raw, k * _OBJECT.size)
            box = Box(x1, y1, x2, y2)
            if not (box.width > 0 and box.height > 0):
                raise DataFormatError(f"record {rec}: degenerate box {box}")
            objects.append((box, cls))
        scenes.append(Scene(pixels.astype(np.float32), objects))
    if pos != len(buf):
        raise DataFormatError(f"trailing bytes after record {count - 1}")
    return scenes


def batch_images(scenes: Sequence[Scene]) -> np.ndarray:
    return np.stack([s.image for s in scenes])
