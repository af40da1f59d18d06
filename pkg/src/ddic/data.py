"""Dataset ingestion, alignment/resampling preprocessing, HC filtering and splitting."""
from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError

ANNOTATION_COLUMNS = ("filename", "pixel_size_mm", "hc_mm", "center_row", "center_col", "angle_deg", "mask")


def dtype_range(img: np.ndarray) -> tuple[float, float]:
    if img.dtype == np.uint8:
        return 0.0, 255.0
    if img.dtype == np.uint16:
        return 0.0, 65535.0
    lo, hi = float(np.min(img)), float(np.max(img))
    return (lo, hi) if hi > lo else (lo, lo + 1.0)


@dataclass
class AnnotatedImage:
    """An image plus the metadata needed to standardize it.

    ``center`` is (row, col) in pixels; ``angle_deg`` is the orientation of the
    anatomical reference axis, counterclockwise from the image horizontal.
    ``value_range`` is the intensity scale of ``image`` (defaults from dtype).
    """

    image: np.ndarray
    pixel_size: float
    hc_mm: float | None = None
    mask: np.ndarray | None = None
    center: tuple[float, float] | None = None
    angle_deg: float | None = None
    value_range: tuple[float, float] | None = None
    name: str = ""

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise DataError(f"{self.name or 'image'}: pixel size must be positive, got {self.pixel_size}")
        if self.hc_mm is not None and not self.hc_mm > 0:
            raise DataError(f"{self.name or 'image'}: HC must be positive, got {self.hc_mm}")
        if self.value_range is None:
            self.value_range = dtype_range(np.asarray(self.image))


@dataclass(frozen=True)
class PreprocessConfig:
    size: int = 128
    pixel_size: float = 1.094
    masking: bool = True
    value_range: tuple[float, float] = (-1.0, 1.0)
    require_alignment: bool = True

    def __post_init__(self):
        if self.size <= 0 or not self.pixel_size > 0:
            raise ConfigurationError("output size and pixel size must be positive")
        if not self.value_range[1] > self.value_range[0]:
            raise ConfigurationError(f"degenerate output range {self.value_range}")


def filter_by_hc(items: Sequence[AnnotatedImage], lo: float = 170.0, hi: float = 350.0):
    """Keep items with lo <= HC <= hi. Returns (kept, number lacking an HC value)."""
    if not lo < hi:
        raise ConfigurationError(f"need lo < hi, got [{lo}, {hi}]")
    kept, missing = [], 0
    for item in items:
        if item.hc_mm is None:
            missing += 1
        elif lo <= item.hc_mm <= hi:
            kept.append(item)
    return kept, missing


def normalize(img: np.ndarray, src: tuple[float, float], dst: tuple[float, float]) -> np.ndarray:
    if tuple(map(float, src)) == tuple(map(float, dst)):
        return img
    lo, hi = src
    a, b = dst
    return (img - lo) * ((b - a) / (hi - lo)) + a


def _is_identity(item: AnnotatedImage, cfg: PreprocessConfig) -> bool:
    h, w = item.image.shape
    center = item.center if item.center is not None else ((h - 1) / 2, (w - 1) / 2)
    return ((h, w) == (cfg.size, cfg.size) and math.isclose(item.pixel_size, cfg.pixel_size, rel_tol=1e-12)
            and (item.angle_deg or 0.0) == 0.0
            and tuple(center) == ((h - 1) / 2, (w - 1) / 2))


def preprocess(item: AnnotatedImage, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Mask, rotate the reference axis to horizontal, recenter, resample, crop/pad, normalize.

    The geometric steps are a single bilinear resampling: output pixel ``o``
    (relative to the output grid center, in output pixels) reads the input at
    ``center + R(angle) @ o * (out_pixel / in_pixel)``.
    """
    name = item.name or "image"
    if cfg.require_alignment and (item.center is None or item.angle_deg is None):
        missing = "center" if item.center is None else "angle_deg"
        raise DataError(f"{name}: missing alignment field {missing!r}")
    if cfg.masking and item.mask is None:
        raise DataError(f"{name}: missing field 'mask' (masking is enabled)")
    img = np.asarray(item.image, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"{name}: expected a 2-D grayscale image, got shape {img.shape}")
    lo_in = float(item.value_range[0])
    if cfg.masking:
        mask = np.asarray(item.mask).astype(bool)
        if mask.shape != img.shape:
            raise DataError(f"{name}: mask shape {mask.shape} does not match image {img.shape}")
        img = np.where(mask, img, lo_in)

    if not _is_identity(item, cfg):
        h, w = img.shape
        cr, cc = item.center if item.center is not None else ((h - 1) / 2, (w - 1) / 2)
        theta = math.radians(item.angle_deg or 0.0)
        scale = cfg.pixel_size / item.pixel_size
        # rows point down: the reference axis runs along (-sin, cos) in (row, col)
        ct, st = math.cos(theta), math.sin(theta)
        matrix = scale * np.array([[ct, -st], [st, ct]])
        oc = (cfg.size - 1) / 2
        offset = np.array([cr, cc]) - matrix @ np.array([oc, oc])
        img = ndimage.affine_transform(img, matrix, offset=offset, output_shape=(cfg.size, cfg.size),
                                       order=1, mode="constant", cval=lo_in)
    return normalize(img, item.value_range, cfg.value_range)


def split_dataset(items: Sequence, train_fraction: float = 0.9, seed: int = 0):
    """Seeded shuffle, then the first floor(N * fraction) items train; the rest test."""
    if not 0 < train_fraction < 1:
        raise ConfigurationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    order = list(range(len(items)))
    random.Random(seed).shuffle(order)
    n_train = math.floor(len(items) * train_fraction + 1e-9)
    return [items[i] for i in order[:n_train]], [items[i] for i in order[n_train:]]


# ----------------------------------------------------------------- file layout


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L"):
            return np.asarray(im, dtype=np.uint16)
        if im.mode == "I":
            arr = np.asarray(im)
            return arr.astype(np.uint16) if arr.max() <= 65535 and arr.min() >= 0 else arr
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8)


def write_image16(path, img: np.ndarray, value_range: tuple[float, float]) -> None:
    """Lossless 16-bit PNG of ``img`` mapped from ``value_range`` onto 0..65535."""
    from PIL import Image

    lo, hi = value_range
    q = np.clip(np.rint((np.asarray(img, dtype=np.float64) - lo) / (hi - lo) * 65535.0), 0, 65535).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")


def write_image8(path, img: np.ndarray, value_range: tuple[float, float]) -> None:
    from PIL import Image

    lo, hi = value_range
    q = np.clip(np.rint((np.asarray(img, dtype=np.float64) - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")


def _opt_float(v: str | None) -> float | None:
    return float(v) if v not in (None, "") else None


def read_annotations(path) -> dict[str, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"annotation file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "filename" not in reader.fieldnames or "pixel_size_mm" not in reader.fieldnames:
            raise DataError(f"{path}: annotation header must include 'filename' and 'pixel_size_mm'")
        return {row["filename"]: row for row in reader}


def write_annotations(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ANNOTATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in ANNOTATION_COLUMNS})


def load_dataset(root, annotations: str = "annotations.csv", images: str = "images") -> list[AnnotatedImage]:
    """Load ``root/images/*`` with metadata from ``root/annotations.csv``.

    Every image must have an annotation record; masks are paths relative to root.
    """
    root = Path(root)
    ann = read_annotations(root / annotations)
    img_dir = root / images
    if not img_dir.is_dir():
        raise DataError(f"image directory not found: {img_dir}")
    files = sorted(p.name for p in img_dir.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff"))
    missing = [f for f in files if f not in ann]
    if missing:
        raise DataError(f"no annotation for: {', '.join(missing)}")
    items = []
    for fname in files:
        row = ann[fname]
        center = None
        if row.get("center_row") not in (None, "") and row.get("center_col") not in (None, ""):
            center = (float(row["center_row"]), float(row["center_col"]))
        mask = None
        if row.get("mask"):
            mpath = root / row["mask"]
            if not mpath.is_file():
                raise DataError(f"{fname}: mask file not found: {mpath}")
            mask = read_image(mpath) > 0
        items.append(AnnotatedImage(
            image=read_image(img_dir / fname), pixel_size=float(row["pixel_size_mm"]),
            hc_mm=_opt_float(row.get("hc_mm")), mask=mask, center=center,
            angle_deg=_opt_float(row.get("angle_deg")), name=fname,
        ))
    return items


def load_image_dir(path) -> tuple[list[str], list[np.ndarray]]:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"image directory not found: {path}")
    names = sorted(p.name for p in path.iterdir() if p.suffix.lower() == ".png")
    return names, [read_image(path / n) for n in names]
