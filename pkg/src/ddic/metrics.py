"""Image-quality metrics: mutual information, PSNR, Frechet distance, CNR, Welch t-test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy import stats

from .errors import DataError, HistogramError, NumericError, StatisticsError


@dataclass(frozen=True)
class HistogramSpec:
    bins: int = 64
    range_x: tuple[float, float] | None = None  # None: the image's own min/max
    range_y: tuple[float, float] | None = None
    log_base: float = 2.0

    def __post_init__(self):
        if self.bins < 2:
            raise HistogramError(f"need at least 2 bins, got {self.bins}")
        for r in (self.range_x, self.range_y):
            if r is not None and not r[1] > r[0]:
                raise HistogramError(f"degenerate histogram range {r}")


def _range(img: np.ndarray, explicit) -> tuple[float, float]:
    if explicit is not None:
        return float(explicit[0]), float(explicit[1])
    lo, hi = float(img.min()), float(img.max())
    if not hi > lo:
        raise HistogramError("image is constant; its min-max histogram range is degenerate")
    return lo, hi


def joint_histogram(x, y, spec: HistogramSpec = HistogramSpec()) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError(f"shape mismatch {x.shape} vs {y.shape}")
    hist, _, _ = np.histogram2d(x, y, bins=spec.bins, range=[_range(x, spec.range_x), _range(y, spec.range_y)])
    return hist


def entropy(p: np.ndarray, base: float = 2.0) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum() / math.log(base))


def mutual_information(x, y, spec: HistogramSpec = HistogramSpec()) -> float:
    """Histogram estimate of I(X; Y) in units of ``spec.log_base``."""
    if np.shape(x) != np.shape(y):
        raise DataError(f"shape mismatch {np.shape(x)} vs {np.shape(y)}")
    pxy = joint_histogram(x, y, spec)
    pxy /= pxy.sum()
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    nz = pxy > 0
    mi = (pxy[nz] * np.log(pxy[nz] / np.outer(px, py)[nz])).sum() / math.log(spec.log_base)
    return max(float(mi), 0.0)


def to_uint8(img, value_range: tuple[float, float] = (0.0, 255.0)) -> np.ndarray:
    """Quantize intensities from ``value_range`` onto 0..255."""
    img = np.asarray(img)
    if img.dtype == np.uint8 and tuple(value_range) == (0.0, 255.0):
        return img
    lo, hi = value_range
    scaled = (img.astype(np.float64) - lo) / (hi - lo) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def psnr(a, b, value_range: tuple[float, float] = (0.0, 255.0)) -> float:
    """PSNR in dB with a peak of 255 after 8-bit quantization; ``inf`` for identical images."""
    if np.shape(a) != np.shape(b):
        raise DataError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")
    qa = to_uint8(a, value_range).astype(np.float64)
    qb = to_uint8(b, value_range).astype(np.float64)
    mse = float(np.mean((qa - qb) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


class FeatureExtractor(Protocol):
    dim: int

    def embed(self, image) -> np.ndarray: ...


class DownsampleFeatures:
    """Flatten an area-averaged ``size`` x ``size`` thumbnail."""

    def __init__(self, size: int = 16):
        self.size = size
        self.dim = size * size

    def embed(self, image) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape
        if h % self.size == 0 and w % self.size == 0:
            fh, fw = h // self.size, w // self.size
            small = img.reshape(self.size, fh, self.size, fw).mean(axis=(1, 3))
        else:
            from skimage.transform import resize

            small = resize(img, (self.size, self.size), order=1, anti_aliasing=True, preserve_range=True)
        return small.ravel()


class IdentityFeatures:
    """Use a precomputed feature vector as-is (handy for 1-D checks)."""

    def __init__(self, dim: int):
        self.dim = dim

    def embed(self, image) -> np.ndarray:
        return np.atleast_1d(np.asarray(image, dtype=np.float64)).ravel()


def _psd_sqrt(m: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    w = np.where(w < tol * max(1.0, float(np.abs(w).max(initial=0.0))), 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2})."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    sa = _psd_sqrt(cov_a)
    inner = sa @ cov_b @ sa
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def _gaussian_fit(feats: np.ndarray, eps: float):
    mu = feats.mean(axis=0)
    cov = np.atleast_2d(np.cov(feats, rowvar=False))
    if eps > 0:
        cov = cov + eps * np.eye(cov.shape[0])
    return mu, cov


def fid(set_a: Iterable, set_b: Iterable, fx: FeatureExtractor | None = None, eps: float = 0.0) -> float:
    """Frechet distance between Gaussian fits of two embedded image sets.

    Without regularization (``eps == 0``) each set needs more samples than
    the feature dimension so that its covariance is non-singular.
    """
    fx = fx or DownsampleFeatures()
    fa = np.stack([fx.embed(x) for x in set_a])
    fb = np.stack([fx.embed(x) for x in set_b])
    if eps == 0:
        for name, f in (("set_a", fa), ("set_b", fb)):
            if f.shape[0] <= f.shape[1]:
                raise NumericError(f"{name}: {f.shape[0]} samples for {f.shape[1]} features gives a singular "
                                   f"covariance; pass eps > 0 to regularize")
    mu_a, cov_a = _gaussian_fit(fa, eps)
    mu_b, cov_b = _gaussian_fit(fb, eps)
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)


@dataclass(frozen=True)
class RoiSpec:
    roi: tuple[int, int, int, int]  # row, col, height, width
    background: tuple[int, int, int, int]

    def validate(self, shape) -> None:
        for name, (r, c, h, w) in (("roi", self.roi), ("background", self.background)):
            if h <= 0 or w <= 0 or r < 0 or c < 0 or r + h > shape[0] or c + w > shape[1]:
                raise DataError(f"{name} rectangle {(r, c, h, w)} does not fit an image of shape {tuple(shape)}")
        (r1, c1, h1, w1), (r2, c2, h2, w2) = self.roi, self.background
        if r1 < r2 + h2 and r2 < r1 + h1 and c1 < c2 + w2 and c2 < c1 + w1:
            raise DataError("roi and background rectangles overlap")


def _patch(img, rect):
    r, c, h, w = rect
    return img[r:r + h, c:c + w]


def cnr(img, roi: RoiSpec) -> float:
    """|mean_roi - mean_bg| / sqrt(var_roi + var_bg), population variances."""
    img = np.asarray(img, dtype=np.float64)
    roi.validate(img.shape)
    a, b = _patch(img, roi.roi), _patch(img, roi.background)
    denom = math.sqrt(a.var() + b.var())
    diff = abs(a.mean() - b.mean())
    if denom == 0:
        if diff == 0:
            raise NumericError("CNR undefined: both regions constant and equal")
        return math.inf
    return diff / denom


@dataclass(frozen=True)
class WelchResult:
    t: float
    p: float
    df: float


def compare_groups(values_a: Sequence[float], values_b: Sequence[float]) -> WelchResult:
    """Two-sided Welch (unequal variance) t-test."""
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise StatisticsError("each group needs at least two values")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise StatisticsError("groups contain non-finite values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 == 0:
        raise StatisticsError("both groups have zero variance")
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))
    return WelchResult(float(t), p, float(df))


@dataclass
class MetricsReport:
    """Per-image values per method, set-level FID and pairwise Welch tests."""

    per_image: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    fid: dict[str, float] = field(default_factory=dict)
    comparisons: list[dict] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        out = {}
        for method, metrics in self.per_image.items():
            out[method] = {}
            for metric, values in metrics.items():
                arr = np.asarray(values, dtype=np.float64)
                fin = arr[np.isfinite(arr)]
                out[method][metric] = {
                    "n": int(arr.size),
                    "n_finite": int(fin.size),
                    "mean": float(fin.mean()) if fin.size else float("nan"),
                    "std": float(fin.std(ddof=1)) if fin.size > 1 else float("nan"),
                }
        return out


def metric_table(sources, outputs, rois: Sequence[RoiSpec | None] | None = None,
                 spec: HistogramSpec = HistogramSpec(), value_range=(0.0, 255.0)) -> dict[str, list[float]]:
    """Per-image MI / PSNR of (source, output) and CNR of both."""
    cols: dict[str, list[float]] = {"mi": [], "psnr": [], "cnr_source": [], "cnr_output": []}
    for i, (src, out) in enumerate(zip(sources, outputs)):
        cols["mi"].append(mutual_information(src, out, spec))
        cols["psnr"].append(psnr(src, out, value_range))
        roi = rois[i] if rois is not None else None
        cols["cnr_source"].append(cnr(src, roi) if roi is not None else float("nan"))
        cols["cnr_output"].append(cnr(out, roi) if roi is not None else float("nan"))
    return cols
