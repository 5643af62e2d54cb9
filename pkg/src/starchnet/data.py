"""Dataset discovery, stratified splitting and the image preprocessing chain.

Expected layout is ``root/<class_name>/<image>.{jpg,jpeg,png}``.  Images are
handled as ``float32`` arrays of shape (H, W, 3) with values in [0, 1] until
``normalize`` turns them into CHW tensors in [-1, 1].
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ArgumentError, DatasetError, DecodeError
from .seeding import derive_rng
from .tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
SPLITS = ("train", "test", "val")
DEFAULT_RATIOS = (0.5, 0.2, 0.3)
IMAGE_SIZE = 224
MAX_ROTATION = 10.0


@dataclass
class Record:
    path: str
    label: int
    split: str | None = None


@dataclass
class DatasetManifest:
    records: list[Record]
    class_names: list[str]
    seed: int = 0
    warnings: list[str] = field(default_factory=list, compare=False, repr=False)

    def split_records(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def split_counts(self) -> dict[str, dict[str, int]]:
        """Per-class record counts for each split tag."""
        counts = {name: {s: 0 for s in SPLITS} for name in self.class_names}
        for r in self.records:
            if r.split is not None:
                counts[self.class_names[r.label]][r.split] += 1
        return counts

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "class_names": self.class_names,
            "records": [{"path": r.path, "class": r.label, "split": r.split} for r in self.records],
        }
        return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            payload = json.loads(text)
            class_names = list(payload["class_names"])
            records = [Record(r["path"], int(r["class"]), r.get("split")) for r in payload["records"]]
            seed = int(payload.get("seed", 0))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed manifest: {exc}") from exc
        for r in records:
            if not 0 <= r.label < len(class_names):
                raise DatasetError(f"record {r.path} has class index {r.label} outside {len(class_names)} classes")
            if r.split not in (None, *SPLITS):
                raise DatasetError(f"record {r.path} has unknown split {r.split!r}")
        return cls(records, class_names, seed)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_json(text)


def _check_decodable(path: Path) -> None:
    try:
        with Image.open(path) as img:
            img.draft("RGB", (IMAGE_SIZE, IMAGE_SIZE))
            img.load()
    except Exception as exc:  # PIL raises a wide range of types on bad files
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def scan_dataset(root) -> DatasetManifest:
    """Build an unsplit manifest from one subdirectory per class."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    warnings: list[str] = []
    found: dict[str, list[str]] = {}
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        paths = []
        for f in sorted(p for p in class_dir.iterdir() if p.is_file() and not p.name.startswith(".")):
            rel = f.relative_to(root).as_posix()
            if f.suffix.lower() not in IMAGE_EXTENSIONS:
                warnings.append(f"skipped {rel}: not a JPEG or PNG file")
                continue
            try:
                _check_decodable(f)
            except DecodeError as exc:
                warnings.append(f"skipped {rel}: {exc}")
                continue
            paths.append(rel)
        if paths:
            found[class_dir.name] = paths
        else:
            warnings.append(f"skipped class directory {class_dir.name}: no decodable images")
    for w in warnings:
        log.warning(w)
    if not found:
        raise DatasetError(f"no class subdirectories with decodable images under {root}")
    class_names = sorted(found)
    records = [Record(p, i, None) for i, name in enumerate(class_names) for p in found[name]]
    records.sort(key=lambda r: r.path)
    return DatasetManifest(records, class_names, 0, warnings)


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    exact = [round(n * r, 9) for r in ratios]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def validate_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(SPLITS):
        raise ArgumentError(f"expected {len(SPLITS)} split ratios (train, test, val), got {len(ratios)}")
    if any(not r > 0 for r in ratios):
        raise ArgumentError(f"split ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ArgumentError(f"split ratios must sum to 1, got {sum(ratios)}")
    return ratios


def stratified_split(manifest: DatasetManifest, ratios=DEFAULT_RATIOS, seed: int = 0) -> DatasetManifest:
    """Assign train/test/val tags per class with a seeded shuffle."""
    ratios = validate_ratios(ratios)
    by_class: dict[int, list[int]] = {}
    for idx, r in enumerate(manifest.records):
        by_class.setdefault(r.label, []).append(idx)
    tags: dict[int, str] = {}
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < len(SPLITS):
            raise DatasetError(
                f"class {manifest.class_names[label]!r} has {len(members)} records; need at least {len(SPLITS)} to split"
            )
        order = derive_rng(seed, "split", label).permutation(len(members))
        start = 0
        for split, size in zip(SPLITS, split_sizes(len(members), ratios)):
            for j in order[start : start + size]:
                tags[members[j]] = split
            start += size
    records = [Record(r.path, r.label, tags.get(i)) for i, r in enumerate(manifest.records)]
    return DatasetManifest(records, list(manifest.class_names), int(seed), list(manifest.warnings))


def decode_image(path) -> np.ndarray:
    """Decode a JPEG/PNG into float32 RGB (H, W, 3) in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_EXTENSIONS:
        raise DecodeError(f"unsupported image format {path.suffix!r} for {path}")
    try:
        with Image.open(path) as img:
            img.load()
            rgb = img.convert("RGB")
    except Exception as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.float32) / np.float32(255.0)


def _axis_coords(out_n: int, in_n: int):
    src = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
    src = np.clip(src, 0, in_n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_n - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, height: int = IMAGE_SIZE, width: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    y0, y1, wy = _axis_coords(height, h)
    x0, x1, wx = _axis_coords(width, w)
    src = img.astype(np.float64)
    rows = src[y0] * (1 - wy)[:, None, None] + src[y1] * wy[:, None, None]
    out = rows[:, x0] * (1 - wx)[None, :, None] + rows[:, x1] * wx[None, :, None]
    return out.astype(np.float32)


def normalize(img: np.ndarray) -> Tensor:
    """Map [0, 1] HWC values to a CHW tensor via (x - 0.5) / 0.5."""
    if img.min() < 0.0 or img.max() > 1.0:
        raise ArgumentError(f"normalize expects values in [0, 1], got range [{img.min()}, {img.max()}]")
    out = (img.astype(np.float32) - np.float32(0.5)) / np.float32(0.5)
    return Tensor(np.ascontiguousarray(out.transpose(2, 0, 1)))


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def rotate(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate counter-clockwise by ``angle`` degrees about the image center.

    Bilinear resampling; samples falling outside the source contribute 0.0.
    """
    if angle == 0:
        return img.copy()
    h, w = img.shape[:2]
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    sx = cos * dx - sin * dy + cx
    sy = sin * dx + cos * dy + cy
    x0, y0 = np.floor(sx).astype(np.int64), np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    src = img.astype(np.float64)
    out = np.zeros(img.shape, np.float64)
    for yy, xx, wgt in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx),
        (y0 + 1, x0, fy * (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = src[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        out += np.where(inside, wgt, 0.0)[..., None] * vals
    return out.astype(np.float32)


def apply_augmentation(img: np.ndarray, flip: bool, angle: float) -> np.ndarray:
    out = hflip(img) if flip else img
    return rotate(out, angle)


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p = 0.5) then a rotation uniform in [-10, 10] degrees."""
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-MAX_ROTATION, MAX_ROTATION))
    return apply_augmentation(img, flip, angle)


class ImageLoader:
    """Decode + resize with an optional in-memory cache of resized images."""

    def __init__(self, root, size: int = IMAGE_SIZE, cache: bool = True):
        self.root = Path(root)
        self.size = size
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def __call__(self, rel_path: str) -> np.ndarray:
        if self._cache is not None and rel_path in self._cache:
            return self._cache[rel_path]
        img = resize_bilinear(decode_image(self.root / rel_path), self.size, self.size)
        if self._cache is not None:
            self._cache[rel_path] = img
        return img


def preprocess(img: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Resized image -> optional augmentation -> normalized CHW array."""
    if rng is not None:
        img = augment(img, rng)
    return normalize(img).data


def make_batches(
    manifest: DatasetManifest,
    split: str,
    loader,
    batch_size: int = 8,
    shuffle: bool = False,
    seed: int = 0,
    epoch: int = 0,
    augment_images: bool = False,
    workers: int = 1,
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (images, labels) batches for one pass over ``split``.

    Order and augmentation depend only on (seed, epoch, record position), so
    the ``workers`` count never changes what is produced.  The last partial
    batch is kept; undecodable images are skipped with a warning.
    """
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    indexed = [(i, r) for i, r in enumerate(manifest.records) if r.split == split]
    if not indexed:
        raise DatasetError(f"split {split!r} is empty")
    if shuffle:
        perm = derive_rng(seed, "shuffle", epoch).permutation(len(indexed))
        indexed = [indexed[j] for j in perm]

    def load(item):
        idx, rec = item
        try:
            img = loader(rec.path)
        except DecodeError as exc:
            log.warning("skipping %s: %s", rec.path, exc)
            return None
        rng = derive_rng(seed, "augment", epoch, idx) if augment_images else None
        return preprocess(img, rng), rec.label

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for start in range(0, len(indexed), batch_size):
            chunk = indexed[start : start + batch_size]
            results = list(pool.map(load, chunk) if pool else map(load, chunk))
            results = [r for r in results if r is not None]
            if not results:
                continue
            images = np.stack([r[0] for r in results])
            labels = np.array([r[1] for r in results], dtype=np.int64)
            yield Tensor(images), labels
    finally:
        if pool:
            pool.shutdown()
