"""Synthetic top-down RGBD plate scenes with exact ground truth, and the Bernoulli trial oracle.

Randomness: every scene draws from ``numpy.random.PCG64`` seeded by
``SeedSequence([seed, index])``, so scene ``i`` of a batch does not depend on
how many other scenes were generated. Trials use ``SeedSequence([seed])``
and consume one uniform per trial in a fixed configuration order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .perception import EnvClass, PerceptionParams, PlateCircle, TablePlane, roi_cells, rect_circle_relation, cell_pixels
from .stats import ACTIONS, TrialRecord, split_action

CATEGORIES = ("long", "non-flat", "flat", "leafy")
PLATE_COLOR = (240, 240, 234)
TABLE_COLOR = (120, 92, 64)
BASE_COLOR = (215, 232, 125)
BASE_HEIGHT = 15.0
PLATE_FLOOR = 1.0
RIM_HEIGHT = 20.0


class PackingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ItemType:
    name: str
    category: str
    color: tuple[int, int, int]


# two visual variants per category; each stands in for a distinct food item
ITEM_TYPES: dict[str, ItemType] = {t.name: t for t in (
    ItemType("carrot", "long", (235, 120, 30)),
    ItemType("celery", "long", (105, 170, 55)),
    ItemType("strawberry", "non-flat", (200, 30, 45)),
    ItemType("grape", "non-flat", (105, 40, 130)),
    ItemType("cantaloupe", "flat", (245, 172, 98)),
    ItemType("honeydew", "flat", (150, 215, 185)),
    ItemType("spinach", "leafy", (35, 95, 40)),
    ItemType("kale", "leafy", (60, 125, 110)),
)}


def items_of(category: str) -> list[str]:
    return [n for n, t in ITEM_TYPES.items() if t.category == category]


@dataclass
class ItemSpec:
    item: str
    category: str
    color: tuple[int, int, int]
    a: float  # semi-axes in pixels, a >= b
    b: float
    squareness: float
    profile: str  # "extrude" | "dome"
    height_mm: float
    pose: tuple[float, float, float]  # cx, cy, rotation (radians)
    env_label: EnvClass
    ragged: tuple[float, int, float] | None = None  # amplitude, lobes, phase

    def __post_init__(self):
        if self.a < self.b:
            raise ValueError("ItemSpec requires a >= b")
        ratio = self.a / self.b
        if self.category == "long" and ratio < 2.5:
            raise ValueError("long items need a/b >= 2.5")
        if self.category == "flat" and (self.height_mm > 12 or ratio >= 2.5):
            raise ValueError("flat items need height <= 12 mm and a/b < 2.5")
        if self.category == "non-flat" and self.profile != "dome":
            raise ValueError("non-flat items use a dome profile")
        if self.category == "leafy" and self.ragged is None:
            raise ValueError("leafy items need a ragged boundary")

    def to_json(self) -> dict:
        d = asdict(self)
        d["env_label"] = str(self.env_label)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ItemSpec":
        d = dict(d)
        d["env_label"] = EnvClass(d["env_label"])
        d["color"] = tuple(d["color"])
        d["pose"] = tuple(d["pose"])
        d["ragged"] = tuple(d["ragged"]) if d.get("ragged") is not None else None
        return cls(**d)


def random_item(item: str, env: EnvClass, rng: np.random.Generator) -> ItemSpec:
    t = ITEM_TYPES[item]
    rot = float(rng.uniform(0, math.pi))
    ragged = None
    if t.category == "long":
        a, b, n, prof, h = rng.uniform(24, 29), rng.uniform(8, 9.5), 2.5, "extrude", 20.0
    elif t.category == "non-flat":
        a = rng.uniform(12, 14.5)
        a, b, n, prof, h = a, a * rng.uniform(0.85, 1.0), 2.0, "dome", 25.0
    elif t.category == "flat":
        a, b, n, prof, h = rng.uniform(14.5, 17.5), rng.uniform(11, 14), 4.0, "extrude", 8.0
    else:
        a, b, n, prof, h = rng.uniform(16, 19), rng.uniform(13, 15.5), 2.0, "extrude", 5.0
        ragged = (0.15, int(rng.integers(5, 8)), float(rng.uniform(0, 2 * math.pi)))
    return ItemSpec(item, t.category, t.color, float(a), float(b), n, prof, h, (0.0, 0.0, rot), env, ragged)


def footprint(spec: ItemSpec, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(inside mask, normalised radius rho in [0, 1]) at pixel centres xs, ys."""
    cx, cy, rot = spec.pose
    c, s = math.cos(rot), math.sin(rot)
    u = (xs - cx) * c + (ys - cy) * s
    v = -(xs - cx) * s + (ys - cy) * c
    n = spec.squareness
    rho = (np.abs(u / spec.a) ** n + np.abs(v / spec.b) ** n) ** (1.0 / n)
    if spec.ragged is not None:
        amp, lobes, phase = spec.ragged
        rho = rho / (1.0 + amp * np.sin(lobes * np.arctan2(v / spec.b, u / spec.a) + phase))
    return rho <= 1.0, rho


def half_extent(spec: ItemSpec) -> tuple[float, float]:
    """Conservative axis-aligned half extents of the rotated footprint."""
    grow = 1.0 + (spec.ragged[0] if spec.ragged else 0.0)
    _, _, rot = spec.pose
    c, s = abs(math.cos(rot)), abs(math.sin(rot))
    a, b = spec.a * grow, spec.b * grow
    if spec.squareness > 2.0:
        return a * c + b * s + 1, a * s + b * c + 1
    return math.hypot(a * c, b * s) + 1, math.hypot(a * s, b * c) + 1


@dataclass
class BaseLayer:
    cx: float
    cy: float
    hx: float
    hy: float

    def covers(self, xs, ys):
        return (np.abs(xs - self.cx) / self.hx) ** 6 + (np.abs(ys - self.cy) / self.hy) ** 6 <= 1.0


@dataclass
class SceneItem:
    spec: ItemSpec
    mask: np.ndarray
    bbox: tuple[int, int, int, int]
    axis: tuple[float, float, float, float]  # canonical smaller-x first, pixels
    item_id: int = 0


@dataclass
class SceneConfig:
    width: int = 480
    height: int = 480
    n_items: int = 4
    items: list[str] | None = None  # item names to draw from (default: all)
    env_mix: dict[str, float] = field(default_factory=lambda: {"ISO": 1.0, "WALL": 1.0, "STACK": 0.5})
    env_counts: dict[str, int] | None = None  # exact label counts; overrides env_mix
    noise_sigma: float = 0.0
    max_attempts: int = 300
    max_restarts: int = 10
    perception: PerceptionParams = field(default_factory=PerceptionParams)


@dataclass
class Scene:
    rgb: np.ndarray
    depth: np.ndarray
    plate: PlateCircle
    plane: TablePlane
    items: list[SceneItem]
    bases: list[BaseLayer]
    seed: int
    rim_width: float = 6.0
    noise_sigma: float = 0.0
    truth_height: np.ndarray | None = None

    def item_ids(self) -> list[int]:
        return [it.item_id for it in self.items]

    def without(self, item_id: int, rng: np.random.Generator | None = None) -> "Scene":
        """Re-render the scene with one item removed (noise redrawn from ``rng``)."""
        keep = [it for it in self.items if it.item_id != item_id]
        if len(keep) == len(self.items):
            raise KeyError(item_id)
        return render(self.rgb.shape[1], self.rgb.shape[0], self.plate, self.plane, self.rim_width,
                      [it.spec for it in keep], self.bases, self.seed, self.noise_sigma, rng,
                      ids=[it.item_id for it in keep])


# ------------------------------------------------------------------- rendering

def render(width: int, height: int, plate: PlateCircle, plane: TablePlane, rim_width: float,
           specs: Sequence[ItemSpec], bases: Sequence[BaseLayer], seed: int, noise_sigma: float = 0.0,
           rng: np.random.Generator | None = None, ids: Sequence[int] | None = None) -> Scene:
    ys, xs = np.indices((height, width), dtype=np.float64)
    dist = np.hypot(xs - plate.cx, ys - plate.cy)
    h = np.zeros((height, width))
    rgb = np.empty((height, width, 3), dtype=np.float64)
    rgb[:] = TABLE_COLOR
    on_plate = dist < plate.r
    rgb[on_plate] = PLATE_COLOR
    h[on_plate] = PLATE_FLOOR
    rim = on_plate & (dist >= plate.r - rim_width)
    # rim slopes from full height at the outer edge down to the floor
    h[rim] = PLATE_FLOOR + (RIM_HEIGHT - PLATE_FLOOR) * (dist[rim] - (plate.r - rim_width)) / rim_width
    for base in bases:
        m = base.covers(xs, ys) & on_plate
        h[m] = BASE_HEIGHT
        rgb[m] = BASE_COLOR
    items = []
    for k, spec in enumerate(specs):
        hx, hy = half_extent(spec)
        cx, cy, _ = spec.pose
        x0, x1 = max(int(math.floor(cx - hx)), 0), min(int(math.ceil(cx + hx)) + 1, width)
        y0, y1 = max(int(math.floor(cy - hy)), 0), min(int(math.ceil(cy + hy)) + 1, height)
        sub_x, sub_y = xs[y0:y1, x0:x1], ys[y0:y1, x0:x1]
        inside, rho = footprint(spec, sub_x, sub_y)
        support = BASE_HEIGHT if spec.env_label == EnvClass.STACK else PLATE_FLOOR
        if spec.profile == "dome":
            prof = spec.height_mm * np.sqrt(np.clip(1 - rho ** 2, 0, 1))
            shade = 0.8 + 0.2 * np.sqrt(np.clip(1 - rho ** 2, 0, 1))
        else:
            prof = np.full_like(rho, spec.height_mm)
            shade = np.ones_like(rho)
            if spec.ragged is not None:
                # leaf veins: a few darker stripes along the major axis
                _, _, rot = spec.pose
                v = -(sub_x - cx) * math.sin(rot) + (sub_y - cy) * math.cos(rot)
                shade = np.where(np.abs(np.sin(v / 3.0)) < 0.25, 0.8, 1.0)
        region_h = h[y0:y1, x0:x1]
        region_h[inside] = support + prof[inside]
        color = np.asarray(spec.color, dtype=np.float64)
        rgb[y0:y1, x0:x1][inside] = color[None, :] * shade[inside][:, None]
        mask = np.zeros((height, width), dtype=bool)
        mask[y0:y1, x0:x1] = inside
        my, mx = np.nonzero(inside)
        if mx.size == 0:
            raise PackingError(f"item {spec.item} rendered empty")
        bbox = (int(mx.min() + x0), int(my.min() + y0), int(mx.max() + x0) + 1, int(my.max() + y0) + 1)
        c, s = math.cos(spec.pose[2]), math.sin(spec.pose[2])
        p0 = (cx - spec.a * c, cy - spec.a * s)
        p1 = (cx + spec.a * c, cy + spec.a * s)
        if (p1[0], p1[1]) < (p0[0], p0[1]):
            p0, p1 = p1, p0
        items.append(SceneItem(spec, mask, bbox, (p0[0], p0[1], p1[0], p1[1]), ids[k] if ids is not None else k))
    # later items never overlap earlier ones (packing guarantees it), so masks stay exact
    plane_z = plane.z(xs, ys)
    z = plane_z - h
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x6E6F])))
        z = z + rng.normal(0.0, noise_sigma, z.shape)
    depth = np.clip(np.rint(z), 1, 65535).astype(np.uint16)
    return Scene(np.clip(np.rint(rgb), 0, 255).astype(np.uint8), depth, plate, plane, items, list(bases), seed,
                 rim_width, noise_sigma, h)


# -------------------------------------------------------------------- packing

def _rects_overlap(a, b, margin=0.0) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _roi_rect(bbox, scale):
    x0, y0, x1, y1 = bbox
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = scale * (x1 - x0) / 2, scale * (y1 - y0) / 2
    return (cx - hw, cy - hh, cx + hw, cy + hh)


def _est_bbox(spec: ItemSpec):
    hx, hy = half_extent(spec)
    cx, cy, _ = spec.pose
    return (cx - hx, cy - hy, cx + hx, cy + hy)


def _robust_label(spec: ItemSpec, plate: PlateCircle, rim_width: float, bases: Sequence[BaseLayer],
                  params: PerceptionParams, shape) -> EnvClass | None:
    """Ground-truth ring occupancy with safety margins; None when any cell is borderline."""
    # render only a window around the ROI, in shifted coordinates
    roi = _roi_rect(_est_bbox(spec), params.roi_scale * 1.1)
    ox, oy = max(int(math.floor(roi[0])) - 8, 0), max(int(math.floor(roi[1])) - 8, 0)
    wx = min(int(math.ceil(roi[2])) + 8, shape[1]) - ox
    wy = min(int(math.ceil(roi[3])) + 8, shape[0]) - oy
    if wx <= 0 or wy <= 0:
        return None
    moved = replace(spec, pose=(spec.pose[0] - ox, spec.pose[1] - oy, spec.pose[2]))
    sc = render(wx, wy, PlateCircle(plate.cx - ox, plate.cy - oy, plate.r), TablePlane(0, 0, 1000), rim_width,
                [moved], [BaseLayer(b.cx - ox, b.cy - oy, b.hx, b.hy) for b in bases], 0)
    it = sc.items[0]
    h = sc.truth_height
    bx0, by0, bx1, by1 = it.bbox
    full_bbox = (bx0 + ox, by0 + oy, bx1 + ox, by1 + oy)
    sure, unsure, n = 0, 0, 0
    for cell in roi_cells(full_bbox, params.roi_scale, params.grid):
        n += 1
        # perturb the plate by the detector's tolerance and the cell by one pixel
        states = set()
        for dr in (-4.0, 0.0, 4.0):
            pc = PlateCircle(plate.cx, plate.cy, plate.r + dr)
            for dc in (-1.0, 0.0, 1.0):
                cc = (cell[0] + dc, cell[1] + dc, cell[2] - dc, cell[3] - dc)
                near, far = rect_circle_relation(cc, pc)
                states.add(near > pc.r or near <= pc.r <= far)
        if states == {True}:
            sure += 1
            continue
        sl = cell_pixels(cell, shape)
        if sl is None:
            return None
        sl = (slice(sl[0].start - oy, sl[0].stop - oy), slice(sl[1].start - ox, sl[1].stop - ox))
        if sl[0].start < 0 or sl[1].start < 0 or sl[0].stop > wy or sl[1].stop > wx:
            return None
        vals = h[sl][~it.mask[sl]]
        frac = float(np.mean(vals > params.occupy_height_mm)) if vals.size else 0.0
        if len(states) > 1 or 0.3 < frac < 0.7:
            unsure += 1
        elif frac >= 0.7:
            sure += 1
    labels = {_vote(k, n, params.supermajority) for k in range(sure, sure + unsure + 1)}
    return labels.pop() if len(labels) == 1 else None


def _vote(n_occ: int, n: int, supermajority: float) -> EnvClass:
    if (n - n_occ) / n >= supermajority - 1e-12:
        return EnvClass.ISO
    if n_occ / n >= supermajority - 1e-12:
        return EnvClass.STACK
    return EnvClass.WALL


def _place(spec_fn, env: EnvClass, plate: PlateCircle, rim_width: float, placed: list, bases: list,
           params: PerceptionParams, shape, rng: np.random.Generator, max_attempts: int):
    floor_r = plate.r - rim_width
    scale = params.roi_scale
    for _ in range(max_attempts):
        spec = spec_fn()
        hx, hy = half_extent(spec)
        ext = math.hypot(hx, hy)
        base = None
        if env == EnvClass.WALL:
            # ring cells only straddle the rim robustly near the four cardinal directions
            theta = rng.integers(0, 4) * (math.pi / 2) + rng.uniform(-0.35, 0.35)
            ux, uy = math.cos(theta), math.sin(theta)
            # radial reach of the bbox in direction theta
            reach = abs(ux) * hx + abs(uy) * hy
            # wall items may lean onto the sloped rim
            d = floor_r - reach + rng.uniform(-2.0, rim_width - 1.0)
            cx, cy = plate.cx + d * ux, plate.cy + d * uy
        else:
            rad = math.sqrt(rng.uniform(0, 1)) * (floor_r - ext)
            phi = rng.uniform(0, 2 * math.pi)
            cx, cy = plate.cx + rad * math.cos(phi), plate.cy + rad * math.sin(phi)
        spec.pose = (float(cx), float(cy), spec.pose[2])
        bb = _est_bbox(spec)
        roi = _roi_rect(bb, scale)
        footprint_rect = bb
        if env == EnvClass.STACK:
            # rounded-square lettuce base whose super-ellipse (n=6) contains the whole ROI
            k = 2 ** (1 / 6)
            hxb, hyb = k * (roi[2] - roi[0]) / 2 + 4, k * (roi[3] - roi[1]) / 2 + 4
            t = np.linspace(0, 2 * np.pi, 90, endpoint=False)
            bx = cx + hxb * np.sign(np.cos(t)) * np.abs(np.cos(t)) ** (1 / 3)
            by = cy + hyb * np.sign(np.sin(t)) * np.abs(np.sin(t)) ** (1 / 3)
            if np.max(np.hypot(bx - plate.cx, by - plate.cy)) > floor_r - 2:
                continue
            base = BaseLayer(cx, cy, hxb, hyb)
            footprint_rect = (cx - hxb, cy - hyb, cx + hxb, cy + hyb)
        sx, sy = np.meshgrid(np.linspace(bb[0], bb[2], 15), np.linspace(bb[1], bb[3], 15))
        inside, _ = footprint(spec, sx, sy)
        limit = plate.r - 1.0 if env == EnvClass.WALL else floor_r
        if np.any(np.hypot(sx[inside] - plate.cx, sy[inside] - plate.cy) > limit):
            continue
        clash = False
        for other in placed:
            # footprints keep clear of every ROI, both ways
            if _rects_overlap(footprint_rect, other["roi"], 3) or _rects_overlap(other["footprint"], roi, 3):
                clash = True
                break
            if _rects_overlap(footprint_rect, other["footprint"], 4):
                clash = True
                break
        if clash:
            continue
        label = _robust_label(spec, plate, rim_width, bases + ([base] if base else []), params, shape)
        if label != env:
            continue
        return spec, base, {"roi": roi, "footprint": footprint_rect}
    raise PackingError(f"could not place a {env} item after {max_attempts} attempts")


def _scene_rng(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def generate_scene(config: SceneConfig | None = None, seed: int = 0, index: int = 0,
                   requests: Sequence[tuple[str, str]] | None = None) -> Scene:
    """Pack ``n_items`` items with realised environment labels; deterministic in (seed, index).

    ``requests`` pins exact (item, env) pairs; otherwise items are drawn from
    ``config.items`` and labels from ``env_counts`` or ``env_mix``.
    """
    cfg = config or SceneConfig()
    rng = _scene_rng(seed, index)
    w, hgt = cfg.width, cfg.height
    r = float(rng.uniform(195, 205))
    plate = PlateCircle(float(w / 2 + rng.uniform(-6, 6)), float(hgt / 2 + rng.uniform(-6, 6)), round(r))
    plane = TablePlane(float(rng.uniform(-0.02, 0.02)), float(rng.uniform(-0.02, 0.02)), float(rng.uniform(780, 820)))
    rim = 6.0
    if requests is None:
        if cfg.n_items < 0:
            raise ValueError("n_items must be >= 0")
        names = cfg.items or list(ITEM_TYPES)
        picks = [names[i] for i in rng.integers(0, len(names), cfg.n_items)]
        if cfg.env_counts:
            envs = [e for e, k in cfg.env_counts.items() for _ in range(k)]
            if len(envs) != cfg.n_items:
                raise ValueError("env_counts must sum to n_items")
        else:
            keys = list(cfg.env_mix)
            pr = np.array([cfg.env_mix[k] for k in keys], dtype=float)
            envs = [keys[i] for i in rng.choice(len(keys), cfg.n_items, p=pr / pr.sum())]
        requests = list(zip(picks, envs))
    # wall items are the most constrained (rim near the cardinal directions), so they go first
    order = {"WALL": 0, "STACK": 1, "ISO": 2}
    reqs = sorted(enumerate(requests), key=lambda t: (order[str(t[1][1])], t[0]))
    for restart in range(cfg.max_restarts):
        try:
            placed, bases, specs = [], [], {}
            for idx, (name, env) in reqs:
                env = EnvClass(str(env))
                spec, base, info = _place(lambda: random_item(name, env, rng), env, plate, rim, placed, bases,
                                          cfg.perception, (hgt, w), rng, cfg.max_attempts)
                placed.append(info)
                if base is not None:
                    bases.append(base)
                specs[idx] = spec
            break
        except PackingError:
            if restart == cfg.max_restarts - 1:
                raise
    ordered = [specs[i] for i in range(len(requests))]
    noise_rng = _scene_rng(seed, index).spawn(1)[0] if cfg.noise_sigma > 0 else None
    return render(w, hgt, plate, plane, rim, ordered, bases, seed, cfg.noise_sigma, noise_rng)


# ----------------------------------------------------------------- crops

def crop_box(bbox, shape, scale: float = 1.25) -> tuple[int, int, int, int]:
    """Square crop around ``bbox`` scaled by ``scale``, shifted to stay inside the image."""
    x0, y0, x1, y1 = bbox
    side = int(math.ceil(max(x1 - x0, y1 - y0) * scale))
    side = min(side, shape[0], shape[1])
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    left = int(round(cx - side / 2))
    top = int(round(cy - side / 2))
    left = min(max(left, 0), shape[1] - side)
    top = min(max(top, 0), shape[0] - side)
    return left, top, left + side, top + side


def crop_item(rgb: np.ndarray, bbox, scale: float = 1.25) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    box = crop_box(bbox, rgb.shape, scale)
    return rgb[box[1]:box[3], box[0]:box[2]], box


def axis_in_crop(axis_px, box) -> np.ndarray:
    x0, y0, x1, _ = box
    side = x1 - x0
    a = np.array(axis_px, dtype=np.float64)
    a[[0, 2]] = (a[[0, 2]] - x0) / side
    a[[1, 3]] = (a[[1, 3]] - y0) / side
    a = np.clip(a, 0.0, 1.0)
    if (a[2], a[3]) < (a[0], a[1]):
        a = a[[2, 3, 0, 1]]
    return a


# -------------------------------------------------------------------- oracle

@dataclass
class OracleTable:
    """Success probability for every (category, env, action); ACTIONS order."""

    p: dict[tuple[str, str], np.ndarray]

    def __post_init__(self):
        for key, row in self.p.items():
            row = np.asarray(row, dtype=np.float64)
            if row.shape != (6,) or np.any(row < 0) or np.any(row > 1):
                raise ValueError(f"oracle row {key} must hold 6 probabilities in [0, 1]")
            self.p[key] = row

    def rates(self, category: str, env) -> np.ndarray:
        return self.p[(category, str(env))]

    def prob(self, category: str, env, action: int | str) -> float:
        a = ACTIONS.index(action) if isinstance(action, str) else int(action)
        return float(self.rates(category, env)[a])

    def best(self, category: str, env) -> tuple[int, float]:
        row = self.rates(category, env)
        return int(np.argmax(row)), float(row.max())

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "env", "action", "p"])
        for (cat, env), row in self.p.items():
            for a, v in zip(ACTIONS, row):
                w.writerow([cat, env, a, repr(float(v))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "OracleTable":
        rows: dict[tuple[str, str], np.ndarray] = {}
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                key = (rec["category"], rec["env"])
                rows.setdefault(key, np.full(6, np.nan))[ACTIONS.index(rec["action"])] = float(rec["p"])
        for key, row in rows.items():
            if np.isnan(row).any():
                raise ValueError(f"oracle CSV misses actions for {key}")
        return cls(rows)


_DEFAULT_ORACLE = {
    #                VS-0  VS-90 TV-0  TV-90 TA-0  TA-90
    ("long", "ISO"): (0.30, 0.80, 0.25, 0.55, 0.15, 0.40),
    ("long", "WALL"): (0.25, 0.75, 0.20, 0.50, 0.20, 0.45),
    ("long", "STACK"): (0.35, 0.80, 0.30, 0.55, 0.10, 0.30),
    ("non-flat", "ISO"): (0.75, 0.55, 0.45, 0.40, 0.30, 0.25),
    ("non-flat", "WALL"): (0.45, 0.40, 0.40, 0.35, 0.80, 0.55),
    ("non-flat", "STACK"): (0.40, 0.35, 0.45, 0.40, 0.85, 0.60),
    ("flat", "ISO"): (0.50, 0.45, 0.90, 0.65, 0.35, 0.30),
    ("flat", "WALL"): (0.45, 0.40, 0.85, 0.60, 0.50, 0.40),
    ("flat", "STACK"): (0.40, 0.35, 0.80, 0.60, 0.30, 0.25),
    ("leafy", "ISO"): (0.80, 0.60, 0.50, 0.45, 0.20, 0.15),
    ("leafy", "WALL"): (0.75, 0.55, 0.50, 0.40, 0.35, 0.30),
    ("leafy", "STACK"): (0.85, 0.65, 0.60, 0.50, 0.25, 0.20),
}


def default_oracle() -> OracleTable:
    """Synthetic ground truth encoding the qualitative dataset findings.

    Long items prefer a 90 degree fork roll; a wall or stack lifts the
    tilted-angled action for non-flat items; vertical and tilted-vertical
    beat tilted-angled for leafy and flat items in a stack. Every row's best
    action leads the runner-up by at least 0.15.
    """
    return OracleTable({k: np.array(v) for k, v in _DEFAULT_ORACLE.items()})


def sample_trial(category: str, env, action, oracle: OracleTable, rng: np.random.Generator) -> bool:
    """One Bernoulli draw; True means the item stayed on the fork."""
    return bool(rng.random() < oracle.prob(category, env, action))


def generate_trial_dataset(oracle: OracleTable, trials_per_config: int = 10, seed: int = 0,
                           items: Sequence[str] | None = None, symmetric: Sequence[str] = ()) -> list[TrialRecord]:
    """Simulated data collection over every (item, env, action).

    ``items`` defaults to one representative per category, named after it.
    Items (or categories) listed in ``symmetric`` are only tried at roll 0.
    """
    if trials_per_config < 1:
        raise ValueError("trials_per_config must be >= 1")
    if items is None:
        pairs = [(c, c) for c in CATEGORIES]
    else:
        pairs = [(n, ITEM_TYPES[n].category) for n in items]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)])))
    records, tid = [], 0
    for name, cat in pairs:
        sym = name in symmetric or cat in symmetric
        for env in EnvClass:
            for action in ACTIONS:
                macro, roll = split_action(action)
                if sym and roll != 0:
                    continue
                for _ in range(trials_per_config):
                    ok = sample_trial(cat, env, action, oracle, rng)
                    records.append(TrialRecord(f"t{tid:06d}", name, cat, macro, roll, str(env),
                                               "success" if ok else "failure"))
                    tid += 1
    return records


# ------------------------------------------------------------------------ io

def _write_ppm(path: Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def _write_pgm16(path: Path, depth: np.ndarray) -> None:
    h, w = depth.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode() + np.ascontiguousarray(depth, dtype=">u2").tobytes())


def _read_netpbm(path: Path):
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end].decode())
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    body = buf[pos:]
    if magic == "P6":
        return np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()
    if magic == "P5":
        dt = ">u2" if maxval > 255 else np.uint8
        return np.frombuffer(body, dtype=dt, count=w * h).reshape(h, w).astype(np.uint16)
    raise ValueError(f"{path}: unsupported netpbm type {magic}")


def rle_encode(mask: np.ndarray) -> list[list[int]]:
    """[start, length] runs of True over the row-major flattened mask."""
    flat = np.concatenate([[False], mask.ravel(), [False]])
    d = np.flatnonzero(np.diff(flat.astype(np.int8)))
    return [[int(s), int(e - s)] for s, e in zip(d[::2], d[1::2])]


def rle_decode(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    for s, n in runs:
        flat[s:s + n] = True
    return flat.reshape(shape)


def write_scene(scene: Scene, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_ppm(d / "rgb.ppm", scene.rgb)
    _write_pgm16(d / "depth.pgm", scene.depth)
    truth = {
        "seed": scene.seed,
        "size": [scene.rgb.shape[1], scene.rgb.shape[0]],
        "plate": asdict(scene.plate),
        "plane": asdict(scene.plane),
        "rim_width": scene.rim_width,
        "noise_sigma": scene.noise_sigma,
        "bases": [asdict(b) for b in scene.bases],
        "items": [{
            "item_id": it.item_id,
            "item": it.spec.item,
            "category": it.spec.category,
            "env": str(it.spec.env_label),
            "bbox": list(it.bbox),
            "axis": list(it.axis),
            "mask_rle": rle_encode(it.mask),
            "spec": it.spec.to_json(),
        } for it in scene.items],
    }
    (d / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    return d


def read_scene(directory) -> Scene:
    d = Path(directory)
    rgb = _read_netpbm(d / "rgb.ppm")
    depth = _read_netpbm(d / "depth.pgm")
    truth = json.loads((d / "truth.json").read_text())
    items = [SceneItem(ItemSpec.from_json(t["spec"]), rle_decode(t["mask_rle"], depth.shape), tuple(t["bbox"]),
                       tuple(t["axis"]), t["item_id"]) for t in truth["items"]]
    return Scene(rgb, depth, PlateCircle(**truth["plate"]), TablePlane(**truth["plane"]), items,
                 [BaseLayer(**b) for b in truth["bases"]], truth["seed"], truth["rim_width"], truth["noise_sigma"])
