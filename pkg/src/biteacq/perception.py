"""Classical RGBD perception: plate, table plane, height map, items, environment, skewering axis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab


class EnvClass(str, Enum):
    ISO = "ISO"
    WALL = "WALL"
    STACK = "STACK"

    def __str__(self) -> str:
        return self.value


class PerceptionError(RuntimeError):
    pass


class PlateNotFound(PerceptionError):
    pass


class TooFewPixels(PerceptionError):
    pass


class DegenerateMask(PerceptionError):
    pass


@dataclass(frozen=True)
class PlateCircle:
    cx: float
    cy: float
    r: float


@dataclass(frozen=True)
class TablePlane:
    a: float
    b: float
    c: float
    rms: float = 0.0

    def z(self, xs, ys):
        return self.a * xs + self.b * ys + self.c


@dataclass
class SegmentMask:
    mask: np.ndarray  # full-image boolean
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1, half-open
    centroid: tuple[float, float]

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class SkeweringAxis:
    p0: tuple[float, float]
    p1: tuple[float, float]

    @property
    def angle_deg(self) -> float:
        """Direction in degrees, folded into [0, 180)."""
        return math.degrees(math.atan2(self.p1[1] - self.p0[1], self.p1[0] - self.p0[0])) % 180.0

    def as_list(self) -> list[float]:
        return [self.p0[0], self.p0[1], self.p1[0], self.p1[1]]


@dataclass
class PerceptionParams:
    min_valid: float = 0.5
    r_min: int = 150
    r_max: int = 240
    edge_threshold: float = 4.0  # mm per pixel, Sobel-normalised
    min_support: float = 0.25  # fraction of the circumference that must vote
    annulus: tuple[float, float] = (1.05, 1.30)
    min_plane_pixels: int = 100
    background_colors: list[tuple[int, int, int]] = field(default_factory=lambda: [(215, 232, 125)])
    color_threshold: float = 25.0  # CIELAB delta-E
    min_area: int = 40
    roi_scale: float = 2.0
    grid: int = 3
    occupy_height_mm: float = 10.0
    supermajority: float = 2.0 / 3.0


def pixel_grid(shape):
    ys, xs = np.indices(shape[:2], dtype=np.float64)
    return xs, ys


# ---------------------------------------------------------------------- plate

def detect_plate(depth: np.ndarray, params: PerceptionParams | None = None) -> PlateCircle:
    """Gradient-directed Hough circle transform on the depth edge map."""
    p = params or PerceptionParams()
    depth = np.asarray(depth)
    valid = depth > 0
    if valid.mean() < p.min_valid:
        raise PlateNotFound(f"only {valid.mean():.1%} valid depth pixels")
    d = depth.astype(np.float64)
    d[~valid] = np.median(d[valid])
    gx = ndimage.sobel(d, axis=1) / 8.0
    gy = ndimage.sobel(d, axis=0) / 8.0
    mag = np.hypot(gx, gy)
    near_invalid = ndimage.binary_dilation(~valid, iterations=1)
    edges = (mag > p.edge_threshold) & ~near_invalid
    ey, ex = np.nonzero(edges)
    if ex.size == 0:
        raise PlateNotFound("no depth edges")
    w = mag[ey, ex]
    ux, uy = gx[ey, ex] / w, gy[ey, ex] / w
    h, wd = depth.shape
    best = (-1.0, 0, 0, 0)
    for r in range(p.r_min, p.r_max + 1):
        # vote along and against the gradient: rim edges may point either way
        cx = np.concatenate([ex - r * ux, ex + r * ux])
        cy = np.concatenate([ey - r * uy, ey + r * uy])
        ww = np.concatenate([w, w])
        xi, yi = np.rint(cx).astype(int), np.rint(cy).astype(int)
        ok = (xi >= 0) & (xi < wd) & (yi >= 0) & (yi < h)
        acc = np.bincount(yi[ok] * wd + xi[ok], weights=ww[ok], minlength=h * wd).reshape(h, wd)
        acc = ndimage.uniform_filter(acc, size=3, mode="constant") * 9.0
        k = int(np.argmax(acc))
        if acc.flat[k] > best[0]:
            best = (float(acc.flat[k]), r, k % wd, k // wd)
    _, r, cx, cy = best
    # support: fraction of the circumference with an edge pixel nearby
    theta = np.linspace(0, 2 * np.pi, int(2 * np.pi * r), endpoint=False)
    px = np.rint(cx + r * np.cos(theta)).astype(int)
    py = np.rint(cy + r * np.sin(theta)).astype(int)
    inside = (px >= 0) & (px < wd) & (py >= 0) & (py < h)
    near = ndimage.binary_dilation(edges, iterations=1)
    support = near[py[inside], px[inside]].sum() / theta.size
    if support < p.min_support:
        raise PlateNotFound(f"best circle (r={r}) has edge support {support:.2f} < {p.min_support}")
    return PlateCircle(float(cx), float(cy), float(r))


# ---------------------------------------------------------------- table plane

def fit_table_plane(depth: np.ndarray, plate: PlateCircle, params: PerceptionParams | None = None) -> TablePlane:
    p = params or PerceptionParams()
    depth = np.asarray(depth)
    xs, ys = pixel_grid(depth.shape)
    dist = np.hypot(xs - plate.cx, ys - plate.cy)
    lo, hi = p.annulus
    sel = (dist >= lo * plate.r) & (dist <= hi * plate.r) & (depth > 0)
    n = int(sel.sum())
    if n < p.min_plane_pixels:
        raise TooFewPixels(f"{n} valid annulus pixels, need {p.min_plane_pixels}")
    A = np.column_stack([xs[sel], ys[sel], np.ones(n)])
    z = depth[sel].astype(np.float64)
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    rms = float(np.sqrt(np.mean((A @ coef - z) ** 2)))
    return TablePlane(float(coef[0]), float(coef[1]), float(coef[2]), rms)


def height_map(depth: np.ndarray, plane: TablePlane) -> np.ndarray:
    """Millimetres above the table; NaN where depth is invalid."""
    depth = np.asarray(depth)
    xs, ys = pixel_grid(depth.shape)
    h = plane.z(xs, ys) - depth.astype(np.float64)
    h[depth == 0] = np.nan
    return h


# --------------------------------------------------------------- segmentation

def plate_mask(shape, plate: PlateCircle, shrink: float = 0.0) -> np.ndarray:
    xs, ys = pixel_grid(shape)
    return np.hypot(xs - plate.cx, ys - plate.cy) < plate.r - shrink


def dominant_color(rgb: np.ndarray, region: np.ndarray, bin_size: int = 8) -> np.ndarray:
    px = rgb[region].astype(np.int64)
    q = px // bin_size
    keys = (q[:, 0] * 256 + q[:, 1]) * 256 + q[:, 2]
    vals, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    return px[inv == int(np.argmax(counts))].mean(axis=0)


def segment_items(rgb: np.ndarray, plate: PlateCircle, params: PerceptionParams | None = None) -> list[SegmentMask]:
    """Pixels inside the plate far (in CIELAB) from every background cluster, 4-connected."""
    p = params or PerceptionParams()
    rgb = np.asarray(rgb)
    inside = plate_mask(rgb.shape, plate)
    if not inside.any():
        raise PerceptionError("plate region is empty")
    clusters = [dominant_color(rgb, inside)] + [np.asarray(c, dtype=np.float64) for c in p.background_colors]
    # the table just outside the rim, so a slightly oversized circle does not leak edge slivers
    ring = plate_mask(rgb.shape, PlateCircle(plate.cx, plate.cy, plate.r + 20)) & ~plate_mask(
        rgb.shape, PlateCircle(plate.cx, plate.cy, plate.r + 4))
    if ring.sum() > p.min_area:
        clusters.append(dominant_color(rgb, ring))
    lab_bg = rgb2lab(np.array(clusters, dtype=np.float64)[None] / 255.0)[0]
    lab = rgb2lab(rgb[inside].astype(np.float64) / 255.0)
    dist = np.min(np.linalg.norm(lab[:, None, :] - lab_bg[None, :, :], axis=2), axis=1)
    fg = np.zeros(rgb.shape[:2], dtype=bool)
    fg[inside] = dist > p.color_threshold
    labels, n = ndimage.label(fg, structure=ndimage.generate_binary_structure(2, 1))
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    slices = ndimage.find_objects(labels)
    out = []
    for lab_id in range(1, n + 1):
        if areas[lab_id] < p.min_area:
            continue
        sl = slices[lab_id - 1]
        m = labels == lab_id
        ys, xs = np.nonzero(m[sl])
        bbox = (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
        out.append(SegmentMask(m, bbox, (float(xs.mean() + sl[1].start), float(ys.mean() + sl[0].start))))
    out.sort(key=lambda s: (-s.area, s.bbox[1], s.bbox[0]))
    return out


# ------------------------------------------------------------------ environment

def roi_cells(bbox, scale: float, grid: int = 3) -> list[tuple[float, float, float, float]]:
    """Ring cells (x0, y0, x1, y1) of the ROI around ``bbox``; the centre cell is dropped."""
    x0, y0, x1, y1 = bbox
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    hw, hh = scale * (x1 - x0) / 2.0, scale * (y1 - y0) / 2.0
    xe = np.linspace(cx - hw, cx + hw, grid + 1)
    ye = np.linspace(cy - hh, cy + hh, grid + 1)
    mid = grid // 2
    return [(xe[i], ye[j], xe[i + 1], ye[j + 1])
            for j in range(grid) for i in range(grid) if not (grid % 2 == 1 and i == mid and j == mid)]


def rect_circle_relation(cell, plate: PlateCircle) -> tuple[float, float]:
    """Nearest and farthest distance from the plate centre to the (pixel-centre) cell rectangle."""
    x0, y0, x1, y1 = cell
    # pixel centres covered are those with x0 <= x < x1; use the covered extent
    ax, bx = math.ceil(x0), math.ceil(x1) - 1
    ay, by = math.ceil(y0), math.ceil(y1) - 1
    nx = min(max(plate.cx, ax), bx)
    ny = min(max(plate.cy, ay), by)
    near = math.hypot(nx - plate.cx, ny - plate.cy)
    far = max(math.hypot(x - plate.cx, y - plate.cy) for x in (ax, bx) for y in (ay, by))
    return near, far


def cell_pixels(cell, shape) -> tuple[slice, slice] | None:
    x0, y0, x1, y1 = cell
    xa, xb = max(math.ceil(x0), 0), min(math.ceil(x1), shape[1])
    ya, yb = max(math.ceil(y0), 0), min(math.ceil(y1), shape[0])
    if xa >= xb or ya >= yb:
        return None
    return slice(ya, yb), slice(xa, xb)


def ring_occupancy(mask: np.ndarray, bbox, heights: np.ndarray, plate: PlateCircle,
                   params: PerceptionParams | None = None) -> list[bool]:
    p = params or PerceptionParams()
    cells = roi_cells(bbox, p.roi_scale, p.grid)
    shape = heights.shape
    if all(cell_pixels(c, shape) is None for c in cells) and cell_pixels(
            (bbox[0], bbox[1], bbox[2], bbox[3]), shape) is None:
        raise PerceptionError("region of interest lies entirely outside the image")
    occ = []
    for cell in cells:
        near, far = rect_circle_relation(cell, plate)
        if near > plate.r or near <= plate.r <= far:
            occ.append(True)  # crosses the rim, or lies beyond it
            continue
        sl = cell_pixels(cell, shape)
        if sl is None:
            occ.append(True)
            continue
        h = heights[sl][~mask[sl]]
        h = h[np.isfinite(h)]
        occ.append(bool(h.size) and float(np.median(h)) > p.occupy_height_mm)
    return occ


def classify_environment(mask, height: np.ndarray, plate: PlateCircle,
                         params: PerceptionParams | None = None) -> EnvClass:
    """Super-majority vote over the ROI ring cells around one item."""
    p = params or PerceptionParams()
    if isinstance(mask, SegmentMask):
        m, bbox = mask.mask, mask.bbox
    else:
        m = np.asarray(mask, dtype=bool)
        bbox = mask_bbox(m)
    occ = ring_occupancy(m, bbox, height, plate, p)
    frac = sum(occ) / len(occ)
    if 1.0 - frac >= p.supermajority - 1e-12:
        return EnvClass.ISO
    if frac >= p.supermajority - 1e-12:
        return EnvClass.STACK
    return EnvClass.WALL


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise DegenerateMask("empty mask")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


# ---------------------------------------------------------------------- axis

def skewering_axis(mask) -> SkeweringAxis:
    """Major axis of the moment ellipse: centroid +/- 2 sigma, shrunk to stay inside the bbox."""
    m = mask.mask if isinstance(mask, SegmentMask) else np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(m)
    if xs.size < 2:
        raise DegenerateMask(f"mask has {xs.size} pixel(s); need at least 2")
    cx, cy = xs.mean(), ys.mean()
    dx, dy = xs - cx, ys - cy
    cov = np.array([[np.mean(dx * dx), np.mean(dx * dy)], [np.mean(dx * dy), np.mean(dy * dy)]])
    evals, evecs = np.linalg.eigh(cov)
    ux, uy = evecs[:, 1]
    lam = 2.0 * math.sqrt(max(evals[1], 0.0))
    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    for u, c, lo, hi in ((ux, cx, x0, x1), (uy, cy, y0, y1)):
        if abs(u) > 1e-12:
            lam = min(lam, (hi - c) / abs(u), (c - lo) / abs(u))
    lam = max(lam, 0.0)
    a = (cx - lam * ux, cy - lam * uy)
    b = (cx + lam * ux, cy + lam * uy)
    if (b[0], b[1]) < (a[0], a[1]):
        a, b = b, a
    if a == b:
        # a centroid on the bbox edge only happens for one-pixel-thick masks; keep a unit segment
        a, b = (cx - 0.5 * ux, cy - 0.5 * uy), (cx + 0.5 * ux, cy + 0.5 * uy)
        if (b[0], b[1]) < (a[0], a[1]):
            a, b = b, a
    return SkeweringAxis((float(a[0]), float(a[1])), (float(b[0]), float(b[1])))


# ------------------------------------------------------------------ pipeline

@dataclass
class ItemPerception:
    segment: SegmentMask
    env: EnvClass
    axis: SkeweringAxis


@dataclass
class PlatePerception:
    plate: PlateCircle
    plane: TablePlane
    heights: np.ndarray
    items: list[ItemPerception]


def perceive(rgb: np.ndarray, depth: np.ndarray, params: PerceptionParams | None = None,
             plate: PlateCircle | None = None) -> PlatePerception:
    """Run the whole pipeline; pass ``plate`` to skip re-detecting a plate that has not moved."""
    p = params or PerceptionParams()
    plate = plate or detect_plate(depth, p)
    plane = fit_table_plane(depth, plate, p)
    heights = height_map(depth, plane)
    items = []
    for seg in segment_items(rgb, plate, p):
        items.append(ItemPerception(seg, classify_environment(seg, heights, plate, p), skewering_axis(seg)))
    return PlatePerception(plate, plane, heights, items)
