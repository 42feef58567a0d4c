"""Synthetic segmentation scenes with jittered bounding boxes.

Each scene is a textured background with a few noise-deformed ellipses.  Boxes
are the tight box of each object loosened by a random per-side margin, so the
box interior always covers the object and always contains some background.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from boxboot import pnm
from boxboot.loss_core import TargetMask

VAL_FRACTION = 0.2
MAX_ATTEMPTS = 100
MIN_OBJECT_PIXELS = 16
MANIFEST = "manifest.txt"
CHECKSUMS = "SHA256SUMS"
BOX_HEADER = ["class", "x0", "y0", "x1", "y1"]


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    classes: int = 1
    objects_min: int = 1
    objects_max: int = 3
    jitter_max: int = 4
    radius_min: float = 5.0
    radius_max: float = 11.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.classes not in (1, 2):
            raise ValueError(f"classes must be 1 or 2, got {self.classes}")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ValueError(f"bad object count range {self.objects_min}..{self.objects_max}")
        if self.jitter_max < 0:
            raise ValueError(f"jitter_max must be >= 0, got {self.jitter_max}")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError(f"bad radius range {self.radius_min}..{self.radius_max}")
        if min(self.width, self.height) < 2 * (self.radius_min + self.jitter_max + 2):
            raise ValueError("image too small for the object radius and jitter")


class Box(NamedTuple):
    cls: int
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)


@dataclass
class SyntheticScene:
    image: np.ndarray  # (3, H, W) float64 in [0, 1], multiples of 1/255
    true_mask: np.ndarray  # (H, W) class ids, 0 = background
    boxes: list[Box]
    instances: np.ndarray | None = None  # (H, W) object index + 1, 0 = none


# per-class mean RGB and spread of the object colour
_CLASS_COLORS = {1: (np.array([0.80, 0.35, 0.25]), 0.10), 2: (np.array([0.25, 0.45, 0.85]), 0.10)}


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int, channels: int) -> np.ndarray:
    coarse = rng.standard_normal((channels, cells, cells))
    return ndimage.zoom(coarse, (1, h / cells, w / cells), order=1, mode="nearest")[:, :h, :w]


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.65, size=3)
    texture = 0.08 * _smooth_noise(rng, h, w, 6, 3) + 0.04 * _smooth_noise(rng, h, w, 16, 1)
    return base[:, None, None] + texture


def _placeable(mask: np.ndarray, occupied: np.ndarray, jitter_max: int) -> bool:
    """Large enough, clear of other objects, and far enough from the border
    that neither the shape nor a fully jittered box gets clipped."""
    if mask.sum() < MIN_OBJECT_PIXELS or (mask & occupied).any():
        return False
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    lo = jitter_max + 1
    return xs.min() >= lo and ys.min() >= lo and xs.max() <= w - 1 - lo and ys.max() <= h - 1 - lo


def _blob(rng: np.random.Generator, cfg: SceneConfig):
    """Random noise-deformed ellipse as a membership function of offsets."""
    a, b = rng.uniform(cfg.radius_min, cfg.radius_max, size=2)
    theta = rng.uniform(0, np.pi)
    amps = rng.uniform(0, 0.08, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)

    def inside(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        phi = np.arctan2(v, u)
        r = 1 + sum(amp * np.cos(k * phi + ph) for k, amp, ph in zip((2, 3, 4), amps, phases))
        return np.hypot(u, v) <= r

    return inside


def _paint_object(rng: np.random.Generator, image: np.ndarray, mask: np.ndarray, cls: int) -> None:
    mean, spread = _CLASS_COLORS[cls]
    color = np.clip(mean + rng.normal(0, spread, size=3), 0, 1)
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    gx, gy = rng.normal(0, 0.01, size=2)
    shade = gx * (xx - xx[mask].mean()) + gy * (yy - yy[mask].mean())
    if cls == 2:
        angle = rng.uniform(0, np.pi)
        shade = shade + 0.06 * np.sin((np.cos(angle) * xx + np.sin(angle) * yy) * 1.2)
    image[:, mask] = color[:, None] + shade[mask][None, :]


def generate_scene(cfg: SceneConfig, index: int) -> SyntheticScene:
    """Deterministic scene for ``(cfg.seed, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.height, cfg.width
    image = _background(rng, h, w)
    true_mask = np.zeros((h, w), dtype=np.int64)
    instances = np.zeros((h, w), dtype=np.int64)
    occupied = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    boxes = []
    n_objects = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    for i in range(n_objects):
        cls = int(rng.integers(1, cfg.classes + 1))
        for _ in range(MAX_ATTEMPTS):
            inside = _blob(rng, cfg)
            lo = cfg.jitter_max + 1 + cfg.radius_min
            cx = rng.uniform(lo, w - 1 - lo)
            cy = rng.uniform(lo, h - 1 - lo)
            mask = inside(xx - cx, yy - cy)
            if _placeable(mask, occupied, cfg.jitter_max):
                break
        else:
            raise DatasetError(f"could not place object {i} of scene {index} after {MAX_ATTEMPTS} attempts")
        occupied |= ndimage.binary_dilation(mask)
        _paint_object(rng, image, mask, cls)
        true_mask[mask] = cls
        instances[mask] = i + 1
        ys, xs = np.nonzero(mask)
        margins = rng.integers(0, cfg.jitter_max + 1, size=4)
        boxes.append(
            Box(
                cls,
                max(int(xs.min()) - int(margins[0]), 0),
                max(int(ys.min()) - int(margins[1]), 0),
                min(int(xs.max()) + int(margins[2]), w - 1),
                min(int(ys.max()) + int(margins[3]), h - 1),
            )
        )
    image = image + rng.normal(0, 0.02, size=image.shape)
    image = np.round(np.clip(image, 0, 1) * 255) / 255
    return SyntheticScene(image=image, true_mask=true_mask, boxes=boxes, instances=instances)


def rasterize_box_target(scene: SyntheticScene) -> TargetMask:
    """Box interiors become targets of their class; smaller boxes paint on top."""
    h, w = scene.true_mask.shape
    y = np.zeros((h, w), dtype=np.int64)
    in_box = np.zeros((h, w), dtype=bool)
    # stable sort: among equal areas the later box wins
    for box in sorted(scene.boxes, key=lambda b: -b.area):
        y[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1] = box.cls
        in_box[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1] = True
    return TargetMask(y=y, in_box=in_box, pixel_perfect=False)


def box_interior(scene: SyntheticScene) -> np.ndarray:
    return rasterize_box_target(scene).in_box


def true_target(scene: SyntheticScene) -> TargetMask:
    return TargetMask(y=scene.true_mask, in_box=box_interior(scene), pixel_perfect=True)


@dataclass
class DatasetSplit:
    pixel_perfect: np.ndarray  # (N,) bool
    train: np.ndarray  # (N,) bool
    pp_ratio: float = 0.18

    @property
    def train_ids(self) -> np.ndarray:
        return np.flatnonzero(self.train)

    @property
    def val_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.train)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_split(n_images: int, pp_ratio: float = 0.18, seed: int = 0) -> DatasetSplit:
    """80:20 train/val split with ``round(pp_ratio * n_train)`` pixel-perfect train images.

    The train/val partition depends only on ``(n_images, seed)``, so datasets that
    differ only in ``pp_ratio`` share their validation images.
    """
    if n_images < 5:
        raise ValueError(f"need at least 5 images, got {n_images}")
    if not 0 <= pp_ratio <= 1:
        raise ValueError(f"pp_ratio must lie in [0, 1], got {pp_ratio}")
    n_val = _round_half_up(VAL_FRACTION * n_images)
    order = np.random.default_rng([seed, 0]).permutation(n_images)
    train = np.ones(n_images, dtype=bool)
    train[order[:n_val]] = False
    train_ids = np.flatnonzero(train)
    n_pp = _round_half_up(pp_ratio * len(train_ids))
    chosen = np.random.default_rng([seed, 1]).permutation(train_ids)[:n_pp]
    pixel_perfect = ~train
    pixel_perfect[chosen] = True
    return DatasetSplit(pixel_perfect=pixel_perfect, train=train, pp_ratio=pp_ratio)


@dataclass
class Dataset:
    scenes: list[SyntheticScene]
    split: DatasetSplit
    width: int
    height: int
    classes: int
    ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.ids:
            self.ids = [f"{i:05d}" for i in range(len(self.scenes))]
        if len(self.ids) != len(self.scenes) or len(self.split.train) != len(self.scenes):
            raise ValueError("scenes, ids and split disagree in length")

    def with_split(self, split: DatasetSplit) -> Dataset:
        return Dataset(self.scenes, split, self.width, self.height, self.classes, list(self.ids))


def generate_dataset(cfg: SceneConfig, n_images: int, pp_ratio: float = 0.18) -> Dataset:
    scenes = [generate_scene(cfg, i) for i in range(n_images)]
    return Dataset(scenes, make_split(n_images, pp_ratio, cfg.seed), cfg.width, cfg.height, cfg.classes)


def manifest_header(n: int, width: int, height: int, classes: int) -> str:
    return f"boxboot-dataset v1 n={n} w={width} h={height} classes={classes}"


def write_dataset(directory, dataset: Dataset) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = [manifest_header(len(dataset.scenes), dataset.width, dataset.height, dataset.classes)]
    names = [MANIFEST]
    for i, (sid, scene) in enumerate(zip(dataset.ids, dataset.scenes)):
        kind = "pp" if dataset.split.pixel_perfect[i] else "bb"
        part = "train" if dataset.split.train[i] else "val"
        lines.append(f"{sid} {kind} {part}")
        pixels = np.round(scene.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        pnm.write_ppm(out / f"img_{sid}.ppm", pixels)
        pnm.write_pgm(out / f"mask_{sid}.pgm", scene.true_mask.astype(np.uint8))
        with open(out / f"boxes_{sid}.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(BOX_HEADER)
            writer.writerows(tuple(box) for box in scene.boxes)
        names += [f"img_{sid}.ppm", f"mask_{sid}.pgm", f"boxes_{sid}.csv"]
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="ascii")
    sums = [f"{hashlib.sha256((out / name).read_bytes()).hexdigest()}  {name}" for name in names]
    (out / CHECKSUMS).write_text("\n".join(sums) + "\n", encoding="ascii")


def _read_checksums(root: Path) -> dict[str, str]:
    path = root / CHECKSUMS
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    table = {}
    for line in path.read_text(encoding="ascii").splitlines():
        digest, _, name = line.partition("  ")
        if not name:
            raise DatasetError(f"{path}: malformed line {line!r}")
        table[name] = digest
    return table


def _read_verified(root: Path, name: str, checksums: dict[str, str]) -> bytes:
    path = root / name
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    data = path.read_bytes()
    if name not in checksums:
        raise DatasetError(f"{path}: no checksum recorded")
    if hashlib.sha256(data).hexdigest() != checksums[name]:
        raise DatasetError(f"{path}: checksum mismatch")
    return data


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    checksums = _read_checksums(root)
    lines = _read_verified(root, MANIFEST, checksums).decode("ascii").splitlines()
    if not lines:
        raise DatasetError(f"{root / MANIFEST}: empty manifest")
    head = lines[0].split()
    if head[:2] != ["boxboot-dataset", "v1"]:
        raise DatasetError(f"{root / MANIFEST}: unrecognised header {lines[0]!r}")
    try:
        meta = dict(token.split("=", 1) for token in head[2:])
        n, width, height, classes = (int(meta[k]) for k in ("n", "w", "h", "classes"))
    except (KeyError, ValueError):
        raise DatasetError(f"{root / MANIFEST}: malformed header {lines[0]!r}") from None
    entries = [line.split() for line in lines[1:] if line.strip()]
    if len(entries) != n:
        raise DatasetError(f"{root / MANIFEST}: header says n={n} but lists {len(entries)} images")

    ids, scenes, pixel_perfect, train = [], [], [], []
    for entry in entries:
        if len(entry) != 3 or entry[1] not in ("pp", "bb") or entry[2] not in ("train", "val"):
            raise DatasetError(f"{root / MANIFEST}: malformed entry {' '.join(entry)!r}")
        sid = entry[0]
        image = _decode_pnm(root, f"img_{sid}.ppm", checksums, (height, width, 3))
        mask = _decode_pnm(root, f"mask_{sid}.pgm", checksums, (height, width))
        if mask.max(initial=0) > classes:
            raise DatasetError(f"{root / f'mask_{sid}.pgm'}: class id above {classes}")
        boxes = _parse_boxes(root / f"boxes_{sid}.csv", _read_verified(root, f"boxes_{sid}.csv", checksums))
        ids.append(sid)
        scenes.append(
            SyntheticScene(
                image=image.transpose(2, 0, 1).astype(np.float64) / 255,
                true_mask=mask.astype(np.int64),
                boxes=boxes,
            )
        )
        pixel_perfect.append(entry[1] == "pp")
        train.append(entry[2] == "train")
    train_arr = np.array(train, dtype=bool)
    pp_arr = np.array(pixel_perfect, dtype=bool)
    n_train = max(int(train_arr.sum()), 1)
    split = DatasetSplit(pixel_perfect=pp_arr, train=train_arr, pp_ratio=float((pp_arr & train_arr).sum() / n_train))
    return Dataset(scenes, split, width, height, classes, ids)


def _decode_pnm(root: Path, name: str, checksums: dict[str, str], shape: tuple) -> np.ndarray:
    _read_verified(root, name, checksums)
    try:
        arr = pnm.read_pnm(root / name)
    except pnm.PnmError as exc:
        raise DatasetError(str(exc)) from None
    if arr.shape != shape:
        raise DatasetError(f"{root / name}: shape {arr.shape}, expected {shape}")
    return arr


def _parse_boxes(path: Path, data: bytes) -> list[Box]:
    rows = list(csv.reader(data.decode("ascii").splitlines()))
    if not rows or rows[0] != BOX_HEADER:
        raise DatasetError(f"{path}: missing header {','.join(BOX_HEADER)}")
    try:
        return [Box(*(int(v) for v in row)) for row in rows[1:] if row]
    except (TypeError, ValueError):
        raise DatasetError(f"{path}: malformed box row") from None
