"""Synthetic paired head phantoms in an ultrasound-like and an MRI-like rendering.

Both renderings share one geometry: an elliptical head with a bright skull
rim and two elliptical cavities, one proximal (near the top, where the probe
sits) and one distal. The ultrasound-like domain has dark cavities,
multiplicative speckle over an additive noise floor and an acoustic shadow
wedge. The MRI-like domain is smooth, has only a faint skull rim and shows
the cavities bright.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    head_axes: tuple[tuple[float, float], tuple[float, float]] = ((0.34, 0.42), (0.26, 0.32))
    center_jitter: float = 0.05
    rotation_deg: tuple[float, float] = (-12.0, 12.0)
    cavity_axes: tuple[tuple[float, float], tuple[float, float]] = ((0.22, 0.32), (0.20, 0.28))
    skull_width: float = 1.5
    # ultrasound-like rendering
    us_levels: dict = field(default_factory=lambda: {"background": 0.0, "skull": 1.0, "tissue": 0.5, "cavity": 0.08})
    speckle: float = 0.5
    speckle_grain: float = 0.7
    noise_floor: float = 0.04  # additive noise inside the head, so anechoic regions are not clean
    shadow_strength: float = 0.65
    shadow_halfwidth_deg: tuple[float, float] = (10.0, 16.0)
    shadow_tilt_deg: tuple[float, float] = (-20.0, 20.0)
    # MRI-like rendering
    mr_levels: dict = field(default_factory=lambda: {"background": 0.0, "skull": 0.2, "tissue": 0.45, "cavity": 0.95})
    smoothness: float = 0.6
    pixel_size: float = 1.094
    seed: int = 0

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("phantom grid must be at least 16 px")
        if max(self.head_axes[0][1], self.head_axes[1][1]) + self.center_jitter >= 0.5:
            raise ValueError("head ellipse may leave the grid")
        if not (0 <= self.shadow_strength <= 1) or self.speckle < 0 or self.noise_floor < 0:
            raise ValueError("shadow strength must lie in [0, 1] and speckle and noise floor must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Ellipse:
    row: float
    col: float
    a: float  # semi-axis along the (rotated) horizontal
    b: float  # semi-axis along the (rotated) vertical
    angle: float  # radians, counterclockwise

    def inside(self, rr, cc) -> np.ndarray:
        return self.level(rr, cc) <= 1.0

    def level(self, rr, cc) -> np.ndarray:
        dy = rr - self.row
        dx = cc - self.col
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        u = ca * dx - sa * dy
        v = sa * dx + ca * dy
        return (u / self.a) ** 2 + (v / self.b) ** 2

    def circumference(self) -> float:
        a, b = self.a, self.b
        h = ((a - b) / (a + b)) ** 2
        return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))


@dataclass
class PhantomGeometry:
    head: Ellipse
    cavities: list[Ellipse]
    head_mask: np.ndarray
    brain_mask: np.ndarray
    cavity_mask: np.ndarray
    shadow_mask: np.ndarray
    roi: tuple[int, int, int, int]
    background: tuple[int, int, int, int]
    hc_mm: float

    def record(self) -> dict:
        return {
            "head": asdict(self.head),
            "cavities": [asdict(c) for c in self.cavities],
            "roi": list(self.roi),
            "background": list(self.background),
            "hc_mm": self.hc_mm,
        }


def _rect_inside(mask: np.ndarray, row: int, col: int, side: int) -> bool:
    if row < 0 or col < 0 or row + side > mask.shape[0] or col + side > mask.shape[1]:
        return False
    return bool(mask[row:row + side, col:col + side].all())


def _roi_pair(cavity: Ellipse, cavity_mask, tissue_mask, side: int = 3):
    """Square ROI inside the cavity and a same-size background square in nearby tissue."""
    r0, c0 = int(round(cavity.row)) - side // 2, int(round(cavity.col)) - side // 2
    roi = None
    for dr, dc in sorted(((dr, dc) for dr in range(-2, 3) for dc in range(-2, 3)), key=lambda d: abs(d[0]) + abs(d[1])):
        if _rect_inside(cavity_mask, r0 + dr, c0 + dc, side):
            roi = (r0 + dr, c0 + dc, side, side)
            break
    if roi is None:
        return None
    best = None
    for r in range(tissue_mask.shape[0] - side + 1):
        for c in range(tissue_mask.shape[1] - side + 1):
            if not _rect_inside(tissue_mask, r, c, side):
                continue
            d = (r - roi[0]) ** 2 + (c - roi[1]) ** 2
            if d <= (side + 1) ** 2:
                continue
            if best is None or d < best[0]:
                best = (d, (r, c, side, side))
    if best is None:
        return None
    return roi, best[1]


def _sample_geometry(spec: PhantomSpec, rng: np.random.Generator, rr, cc):
    n = spec.size
    while True:
        a = rng.uniform(*spec.head_axes[0]) * n
        b = rng.uniform(*spec.head_axes[1]) * n
        ang = math.radians(rng.uniform(*spec.rotation_deg))
        row = (0.5 + rng.uniform(-spec.center_jitter, spec.center_jitter)) * n - 0.5
        col = (0.5 + rng.uniform(-spec.center_jitter, spec.center_jitter)) * n - 0.5
        head = Ellipse(row, col, a, b, ang)
        inner = Ellipse(row, col, a - spec.skull_width, b - spec.skull_width, ang)
        cavities = []
        for side in (-1, 1):  # proximal (upper) then distal (lower)
            ca = rng.uniform(*spec.cavity_axes[0]) * a
            cb = rng.uniform(*spec.cavity_axes[1]) * b
            off_v = side * rng.uniform(0.35, 0.5) * b
            off_u = rng.uniform(-0.25, 0.25) * a
            dy = math.cos(ang) * off_v + math.sin(ang) * off_u
            dx = -math.sin(ang) * off_v + math.cos(ang) * off_u
            cavities.append(Ellipse(row + dy, col + dx, ca, cb, ang + rng.uniform(-0.3, 0.3)))
        head_mask = head.inside(rr, cc)
        brain_mask = inner.inside(rr, cc)
        cavity_mask = np.zeros_like(head_mask)
        for cav in cavities:
            cavity_mask |= cav.inside(rr, cc)
        cavity_mask &= brain_mask
        distal_mask = cavities[1].inside(rr, cc) & brain_mask
        tissue = brain_mask & ~ndimage.binary_dilation(cavity_mask)
        pair = _roi_pair(cavities[1], distal_mask, tissue)
        if pair is not None:
            return head, cavities, head_mask, brain_mask, cavity_mask, pair


def generate_phantom_pair(spec: PhantomSpec, index: int = 0):
    """Render one phantom in both domains.

    Returns ``(domain_a, domain_b, geometry)``; images are float64 in [0, 1].
    ``index`` selects an independent draw from the same spec and seed.
    """
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    rr, cc = np.mgrid[0:n, 0:n].astype(np.float64)
    head, cavities, head_mask, brain_mask, cavity_mask, (roi, bg) = _sample_geometry(spec, rng, rr, cc)

    def render(levels):
        img = np.full((n, n), levels["background"], dtype=np.float64)
        img[head_mask] = levels["skull"]
        img[brain_mask] = levels["tissue"]
        img[cavity_mask] = levels["cavity"]
        return img

    clean_a = render(spec.us_levels)

    # shadow wedge cast from a probe above the head, spreading downward
    apex_r, apex_c = head.row - head.b - 0.3 * n, head.col + rng.uniform(-0.15, 0.15) * n
    tilt = math.radians(rng.uniform(*spec.shadow_tilt_deg))
    half = math.radians(rng.uniform(*spec.shadow_halfwidth_deg))
    theta = np.arctan2(cc - apex_c, rr - apex_r)
    delta = np.angle(np.exp(1j * (theta + tilt)))
    shadow_mask = (np.abs(delta) <= half) & brain_mask

    z = rng.standard_normal((n, n))
    if spec.speckle_grain > 0:
        z = ndimage.gaussian_filter(z, spec.speckle_grain, mode="wrap")
        z /= z.std()
    speckle = np.exp(spec.speckle * z - 0.5 * spec.speckle ** 2)
    domain_a = clean_a * speckle
    domain_a[shadow_mask] *= 1.0 - spec.shadow_strength
    floor = rng.standard_normal((n, n))
    if spec.noise_floor > 0:
        domain_a[head_mask] += spec.noise_floor * floor[head_mask]
    domain_a = np.clip(domain_a, 0.0, 1.0)

    domain_b = render(spec.mr_levels)
    if spec.smoothness > 0:
        domain_b = ndimage.gaussian_filter(domain_b, spec.smoothness, mode="nearest")
    domain_b = np.clip(domain_b, 0.0, 1.0)

    geometry = PhantomGeometry(
        head=head, cavities=cavities, head_mask=head_mask, brain_mask=brain_mask, cavity_mask=cavity_mask,
        shadow_mask=shadow_mask, roi=roi, background=bg, hc_mm=head.circumference() * spec.pixel_size,
    )
    return domain_a, domain_b, geometry


def render_clean_a(spec: PhantomSpec, geometry: PhantomGeometry) -> np.ndarray:
    lv = spec.us_levels
    img = np.full(geometry.head_mask.shape, lv["background"], dtype=np.float64)
    img[geometry.head_mask] = lv["skull"]
    img[geometry.brain_mask] = lv["tissue"]
    img[geometry.cavity_mask] = lv["cavity"]
    return img


def phantom_set(spec: PhantomSpec, start: int, count: int):
    """Draw ``count`` pairs with indices start..start+count-1."""
    return [generate_phantom_pair(spec, i) for i in range(start, start + count)]
