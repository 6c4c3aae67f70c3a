"""Synthetic location-sensitive shapes benchmark, manifest I/O, splits, batching.

Each 8-bit grayscale image holds one or two filled shapes, each centred
(with jitter) in a different quadrant.  A label is ``<shape>@<quadrant>``,
so the same shape in a different place is a different class - the model
has to keep track of where things are, not only what they are.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .rng import PrngState

SHAPES = ("square", "disc", "cross", "triangle")
QUADRANTS = ("UL", "UR", "LL", "LR")
SPLIT_RATIOS = (0.7, 0.1, 0.2)


class DataError(Exception):
    """Base class for dataset problems."""


class MissingImageError(DataError):
    pass


class ImageSizeError(DataError):
    pass


class LabelValueError(DataError):
    pass


class ManifestFormatError(DataError):
    pass


@dataclass
class SynthConfig:
    canvas: tuple[int, int] = (64, 64)
    shapes: tuple[str, ...] = SHAPES
    n_images: int = 3000
    shapes_per_image: int = 2
    noise_sigma: float = 0.1
    jitter: int | None = None  # default round(9/64 of the canvas height)
    radius: float | None = None  # default 5/64 of the canvas height
    seed: int = 0

    @property
    def label_names(self) -> list[str]:
        return [f"{s}@{q}" for s in self.shapes for q in QUADRANTS]

    @property
    def max_offset(self) -> int:
        return self.jitter if self.jitter is not None else round(self.canvas[0] * 9 / 64)

    @property
    def shape_radius(self) -> float:
        return self.radius if self.radius is not None else self.canvas[0] * 5 / 64

    def validate(self) -> None:
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ValueError(f"shapes must be a non-empty subset of {SHAPES}")
        if not 1 <= self.shapes_per_image <= 2:
            raise ValueError("shapes_per_image must be 1 or 2")
        if self.noise_sigma < 0 or self.max_offset < 0:
            raise ValueError("noise_sigma and jitter must be non-negative")
        h, w = self.canvas
        if self.shape_radius + self.max_offset >= min(h, w) / 4:
            raise ValueError("shape radius plus jitter must stay inside a quadrant")


@dataclass
class Placement:
    shape: str
    quadrant: str
    cy: float
    cx: float
    radius: float


def shape_mask(shape: str, cy: float, cx: float, r: float, canvas: tuple[int, int]) -> np.ndarray:
    """Boolean mask of a filled shape centred at pixel ``(cy, cx)``."""
    yy, xx = np.mgrid[0:canvas[0], 0:canvas[1]]
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.8 * r
    if shape == "disc":
        return dy * dy + dx * dx <= r * r
    if shape == "cross":
        arm = r / 3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "triangle":
        # apex up, base at dy = +r
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    raise ValueError(f"unknown shape {shape!r}")


def quadrant_center(quadrant: str, canvas: tuple[int, int]) -> tuple[float, float]:
    h, w = canvas
    row = 0 if quadrant[0] == "U" else 1
    col = 0 if quadrant[1] == "L" else 1
    return (2 * row + 1) * h / 4 - 0.5, (2 * col + 1) * w / 4 - 0.5


def layout(cfg: SynthConfig, index: int) -> list[Placement]:
    """Shapes drawn into image ``index``; a pure function of ``(cfg.seed, index)``."""
    rng = PrngState(cfg.seed, "synth", index)
    k = 1 + int(rng.integers(0, cfg.shapes_per_image, 1)[0])
    quads = rng.permutation(len(QUADRANTS))[:k]
    kinds = rng.integers(0, len(cfg.shapes), k)
    offsets = rng.integers(-cfg.max_offset, cfg.max_offset + 1, 2 * k)
    out = []
    for i in range(k):
        q = QUADRANTS[quads[i]]
        cy, cx = quadrant_center(q, cfg.canvas)
        out.append(Placement(cfg.shapes[kinds[i]], q, cy + offsets[2 * i], cx + offsets[2 * i + 1],
                             cfg.shape_radius))
    return out


def render(cfg: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """8-bit image and multi-hot label row for image ``index``."""
    names = cfg.label_names
    canvas = np.zeros(cfg.canvas, dtype=np.float64)
    labels = np.zeros(len(names), dtype=np.uint8)
    for p in layout(cfg, index):
        canvas[shape_mask(p.shape, p.cy, p.cx, p.radius, cfg.canvas)] = 1.0
        labels[names.index(f"{p.shape}@{p.quadrant}")] = 1
    noise = PrngState(cfg.seed, "synth-noise", index).normal(canvas.size).reshape(cfg.canvas)
    pixels = np.clip(canvas + cfg.noise_sigma * noise, 0.0, 1.0)
    return np.round(pixels * 255).astype(np.uint8), labels


@dataclass
class Manifest:
    root: Path
    label_names: list[str]
    paths: list[str] = field(default_factory=list)
    labels: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.uint8))

    def __len__(self) -> int:
        return len(self.paths)


def generate_synthetic(cfg: SynthConfig, out_dir: str | Path) -> Manifest:
    cfg.validate()
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    names = cfg.label_names
    width = max(5, len(str(cfg.n_images - 1)))
    paths, rows = [], []
    for i in range(cfg.n_images):
        pixels, labels = render(cfg, i)
        rel = f"images/img_{i:0{width}d}.png"
        Image.fromarray(pixels, mode="L").save(root / rel, format="PNG")
        paths.append(rel)
        rows.append(labels)
    labels = np.stack(rows)
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", *names])
        for rel, row in zip(paths, labels):
            writer.writerow([rel, *row.tolist()])
    (root / "labels.txt").write_text("".join(f"{n}\n" for n in names), encoding="utf-8")
    return Manifest(root, names, paths, labels)


def load_manifest(directory: str | Path, canvas: tuple[int, int] | None = None, check_images: bool = True) -> Manifest:
    """Read and validate ``manifest.csv`` and ``labels.txt``.

    Every referenced image must exist and decode to an 8-bit grayscale image
    of the canvas size (taken from the first image unless ``canvas`` is given).
    """
    root = Path(directory)
    labels_path, manifest_path = root / "labels.txt", root / "manifest.csv"
    for p in (labels_path, manifest_path):
        if not p.is_file():
            raise ManifestFormatError(f"missing {p.name} in {root}")
    names = [line.strip() for line in labels_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", *names]:
            raise ManifestFormatError(f"manifest header {header} does not match labels.txt {names}")
        paths, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(names) + 1:
                raise ManifestFormatError(f"manifest row {lineno}: expected {len(names) + 1} cells, got {len(row)}")
            cells = row[1:]
            for name, cell in zip(names, cells):
                if cell not in ("0", "1"):
                    raise LabelValueError(f"manifest row {lineno} ({row[0]}): label {name!r} has non-binary value {cell!r}")
            paths.append(row[0])
            rows.append([int(c) for c in cells])
    manifest = Manifest(root, names, paths, np.array(rows, dtype=np.uint8).reshape(len(rows), len(names)))
    if check_images:
        for lineno, rel in enumerate(paths, start=2):
            _check_image(root / rel, canvas, lineno)
            if canvas is None:
                with Image.open(root / rel) as im:
                    canvas = (im.height, im.width)
    return manifest


def _check_image(path: Path, canvas, lineno: int) -> None:
    if not path.is_file():
        raise MissingImageError(f"manifest row {lineno}: image {path} does not exist")
    with Image.open(path) as im:
        if im.mode != "L":
            raise ImageSizeError(f"manifest row {lineno}: image {path} is mode {im.mode}, expected 8-bit grayscale")
        if canvas is not None and (im.height, im.width) != tuple(canvas):
            raise ImageSizeError(f"manifest row {lineno}: image {path} is {im.height}x{im.width}, "
                                 f"expected {canvas[0]}x{canvas[1]}")


def read_image(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Decode an 8-bit grayscale image to ``[1, H, W]`` float32 in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise MissingImageError(f"image {path} does not exist")
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "P", "RGB", "RGBA", "I;16"):
            raise ImageSizeError(f"unsupported image mode {im.mode}")
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    if size is not None and arr.shape != tuple(size):
        raise ImageSizeError(f"image {path} is {arr.shape[0]}x{arr.shape[1]}, expected {size[0]}x{size[1]}")
    return (arr / 255.0)[None]


@dataclass
class Example:
    image: Tensor
    targets: Tensor


def load_example(manifest: Manifest, row: int) -> Example:
    image = read_image(manifest.root / manifest.paths[row])
    return Example(Tensor(image), Tensor(manifest.labels[row].astype(np.float32)))


@dataclass
class Split:
    images: np.ndarray   # [n, 1, H, W] float32
    targets: np.ndarray  # [n, L] float32
    label_names: list[str]
    rows: np.ndarray     # manifest row of each example

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, idx: Sequence[int]) -> "Split":
        idx = np.asarray(idx)
        return Split(self.images[idx], self.targets[idx], self.label_names, self.rows[idx])


def load_arrays(manifest: Manifest) -> Split:
    images = np.stack([read_image(manifest.root / p) for p in manifest.paths]) if len(manifest) else None
    return Split(images, manifest.labels.astype(np.float32), list(manifest.label_names), np.arange(len(manifest)))


def split_sizes(n: int, ratios: Sequence[float] = SPLIT_RATIOS) -> tuple[int, int, int]:
    """Floor-based val/test sizes; the remainder goes to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {tuple(ratios)}")
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_indices(n: int, ratios: Sequence[float] = SPLIT_RATIOS, seed: int = 0):
    if n < 1:
        raise ValueError("cannot split an empty manifest")
    n_train, n_val, n_test = split_sizes(n, ratios)
    perm = PrngState(seed, "split").permutation(n)
    val = np.sort(perm[:n_val])
    test = np.sort(perm[n_val:n_val + n_test])
    train = np.sort(perm[n_val + n_test:])
    return train, val, test


def split_dataset(data: Split, ratios: Sequence[float] = SPLIT_RATIOS, seed: int = 0) -> tuple[Split, Split, Split]:
    """Disjoint, exhaustive train/val/test partition, deterministic given ``seed``."""
    return tuple(data.subset(idx) for idx in split_indices(len(data), ratios, seed))


def iterate_batches(split: Split, batch_size: int, epoch: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Minibatches in a per-epoch order drawn from the ``(seed, "data", epoch)`` stream; last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = PrngState(seed, "data", epoch).permutation(len(split))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield split.images[idx], split.targets[idx]
