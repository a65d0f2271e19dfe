"""Synthetic multi-object scenes with exact pixel masks.

Each scene is a noisy gray background with a few filled shapes (circle,
square, triangle by default) painted in draw order, so later shapes
occlude earlier ones. The mask stores ``class_id + 1`` per pixel with 0
for background, and the multi-hot labels are derived from the final
mask, never from the draw list, so a fully occluded object contributes
no label. Datasets are stored as one P6 portable pixmap per image, one
P5 portable graymap per mask, and a single ``labels.csv``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import ConfigError

MIN_SHAPE_PIXELS = 16
_MAX_RETRIES = 100

_PALETTE = (
    (0.85, 0.25, 0.25),
    (0.25, 0.75, 0.30),
    (0.25, 0.35, 0.85),
    (0.85, 0.75, 0.25),
    (0.75, 0.30, 0.80),
    (0.30, 0.80, 0.80),
)

KNOWN_SHAPES = ("circle", "square", "triangle")


class FormatError(ValueError):
    """A stored file does not follow the expected layout."""


class GenerationError(RuntimeError):
    """A scene draw kept producing degenerate shapes."""


@dataclass(frozen=True)
class SceneSpec:
    """Distribution of one synthetic scene.

    Scales are shape half-extents as a fraction of ``image_size``;
    ``background_noise`` is the standard deviation of the Gaussian
    texture around mid-gray.
    """

    image_size: int = 64
    classes: tuple[str, ...] = ("circle", "square", "triangle")
    min_objects: int = 1
    max_objects: int = 3
    min_scale: float = 0.10
    max_scale: float = 0.22
    background_noise: float = 0.08
    color_jitter: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        if not self.classes:
            raise ConfigError("need at least one class")
        for name in self.classes:
            if name not in KNOWN_SHAPES:
                raise ConfigError(f"unknown shape {name!r}; known: {KNOWN_SHAPES}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("object count range must satisfy 0 <= min <= max")
        if not 0.0 < self.min_scale <= self.max_scale <= 0.5:
            raise ConfigError("scale range must satisfy 0 < min <= max <= 0.5")
        if self.background_noise < 0 or self.color_jitter < 0:
            raise ConfigError("noise and jitter must be non-negative")

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass
class SceneSample:
    """Image in [0, 1], integer mask (0 is background), multi-hot labels."""

    image: np.ndarray
    mask: np.ndarray
    labels: np.ndarray


def _raster(shape: str, size: int, cy: float, cx: float, half: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    yy = yy + 0.5 - cy
    xx = xx + 0.5 - cx
    if shape == "circle":
        return yy * yy + xx * xx <= half * half
    if shape == "square":
        return np.maximum(np.abs(yy), np.abs(xx)) <= half
    # Upward triangle: apex at the top, flat base; three half-plane tests.
    apex = np.array([-half, 0.0])
    left = np.array([half, -half])
    right = np.array([half, half])

    def side(a, b):
        return (b[1] - a[1]) * (yy - a[0]) - (b[0] - a[0]) * (xx - a[1])

    d1, d2, d3 = side(apex, left), side(left, right), side(right, apex)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> SceneSample:
    """Draw one scene from ``spec`` using ``rng`` alone, so equal states
    give identical scenes."""
    size = spec.image_size
    image = 0.5 + rng.normal(0.0, spec.background_noise, size=(size, size, 3))
    mask = np.zeros((size, size), dtype=np.uint8)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(count):
        cls = int(rng.integers(0, spec.num_classes))
        region = None
        for _attempt in range(_MAX_RETRIES):
            half = rng.uniform(spec.min_scale, spec.max_scale) * size
            margin = half + 1.0
            cy = rng.uniform(margin, size - margin)
            cx = rng.uniform(margin, size - margin)
            candidate = _raster(spec.classes[cls], size, cy, cx, half)
            if candidate.sum() >= MIN_SHAPE_PIXELS:
                region = candidate
                break
        if region is None:
            raise GenerationError(
                f"no non-degenerate {spec.classes[cls]} after {_MAX_RETRIES} draws"
            )
        base = np.array(_PALETTE[cls % len(_PALETTE)])
        color = base + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        image[region] = color
        mask[region] = cls + 1
    image = np.clip(image, 0.0, 1.0)
    labels = np.zeros(spec.num_classes)
    present = np.unique(mask)
    labels[present[present > 0] - 1] = 1.0
    return SceneSample(image=image, mask=mask, labels=labels)


def make_dataset(spec: SceneSpec, count: int) -> list[SceneSample]:
    """``count`` scenes on independent per-index streams derived from
    ``spec.seed``, so any prefix of the dataset is stable."""
    return [
        generate_scene(spec, np.random.default_rng((spec.seed, index)))
        for index in range(count)
    ]


# ---------------------------------------------------------------------------
# netpbm files


def _write_netpbm(path: Path, magic: bytes, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(pixels.astype(np.uint8).tobytes())


def write_ppm(path, image01: np.ndarray) -> None:
    """Store an [H, W, 3] float image in [0, 1] as an 8-bit P6 file."""
    if image01.ndim != 3 or image01.shape[2] != 3:
        raise FormatError(f"expected [H, W, 3] image, got {image01.shape}")
    _write_netpbm(Path(path), b"P6", np.round(np.clip(image01, 0.0, 1.0) * 255.0))


def write_pgm(path, gray: np.ndarray) -> None:
    """Store an [H, W] integer array with values in [0, 255] as P5."""
    if gray.ndim != 2:
        raise FormatError(f"expected [H, W] array, got {gray.shape}")
    if gray.min() < 0 or gray.max() > 255:
        raise FormatError("P5 values must fit in [0, 255]")
    _write_netpbm(Path(path), b"P5", gray)


def _parse_header(raw: bytes, path) -> tuple[bytes, int, int, int]:
    """Returns (magic, width, height, raster offset). Comments and any
    whitespace are legal between header tokens; exactly one whitespace
    byte separates the maxval from the raster."""
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unknown magic {magic!r} at byte 0")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError(f"{path}: expected header integer at byte {start}")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError(f"{path}: expected whitespace after maxval at byte {pos}")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    return magic, width, height, pos


def _read_netpbm(path) -> tuple[bytes, np.ndarray]:
    raw = Path(path).read_bytes()
    magic, width, height, pos = _parse_header(raw, path)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = raw[pos : pos + need]
    if len(raster) != need:
        raise FormatError(
            f"{path}: raster truncated at byte {pos + len(raster)}, need {need} bytes"
        )
    data = np.frombuffer(raster, dtype=np.uint8)
    if channels == 3:
        return magic, data.reshape(height, width, 3)
    return magic, data.reshape(height, width)


def read_ppm(path) -> np.ndarray:
    """Load a P6 file as an [H, W, 3] float image in [0, 1]."""
    magic, data = _read_netpbm(path)
    if magic != b"P6":
        raise FormatError(f"{path}: expected P6, found {magic.decode()}")
    return data.astype(np.float64) / 255.0

def read_pgm(path) -> np.ndarray:
    """Load a P5 file as an [H, W] uint8 array."""
    magic, data = _read_netpbm(path)
    if magic != b"P5":
        raise FormatError(f"{path}: expected P5, found {magic.decode()}")
    return data


# ---------------------------------------------------------------------------
# dataset directories


def _image_name(index: int) -> str:
    return f"scene_{index:05d}.ppm"


def _mask_name(index: int) -> str:
    return f"scene_{index:05d}_mask.pgm"


def write_dataset(samples: list[SceneSample], directory) -> None:
    """Store images, masks, and ``labels.csv`` in ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["filename", "classes"])
        for i, sample in enumerate(samples):
            write_ppm(directory / _image_name(i), sample.image)
            write_pgm(directory / _mask_name(i), sample.mask)
            ids = np.flatnonzero(sample.labels > 0)
            writer.writerow([_image_name(i), ",".join(str(c) for c in ids)])


def read_dataset(directory, num_classes: int | None = None) -> list[SceneSample]:
    """Load a stored dataset; a directory without ``labels.csv`` is an
    empty dataset. Class count defaults to one past the largest id seen."""
    directory = Path(directory)
    index_path = directory / "labels.csv"
    if not index_path.exists():
        return []
    rows: list[tuple[str, list[int]]] = []
    with open(index_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["filename", "classes"]:
            raise FormatError(f"{index_path}: expected header filename,classes")
        for row in reader:
            if len(row) != 2:
                raise FormatError(f"{index_path}: malformed row {row!r}")
            ids = [int(tok) for tok in row[1].split(",")] if row[1] else []
            rows.append((row[0], ids))
    if num_classes is None:
        largest = max((max(ids) for _, ids in rows if ids), default=-1)
        num_classes = largest + 1
    samples = []
    for filename, ids in rows:
        image = read_ppm(directory / filename)
        mask = read_pgm(directory / Path(filename).name.replace(".ppm", "_mask.pgm"))
        labels = np.zeros(num_classes)
        for c in ids:
            if not 0 <= c < num_classes:
                raise FormatError(f"{index_path}: class id {c} out of range for C={num_classes}")
            labels[c] = 1.0
        samples.append(SceneSample(image=image, mask=mask, labels=labels))
    return samples
