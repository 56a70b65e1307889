import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biteacq.perception import (
    DegenerateMask, EnvClass, PerceptionError, PerceptionParams, PlateCircle, PlateNotFound, TablePlane,
    TooFewPixels, classify_environment, detect_plate, fit_table_plane, height_map, mask_bbox, perceive,
    rect_circle_relation, roi_cells, segment_items, skewering_axis,
)
from biteacq.scene import BaseLayer, EnvClass as SceneEnv, ItemSpec, SceneConfig, generate_scene, random_item, render

PLATE = PlateCircle(240.0, 240.0, 200)
FLAT = TablePlane(0.0, 0.0, 800.0)


def carrot(x, y, rot=0.0, env=EnvClass.ISO, a=28.0, b=9.0):
    return ItemSpec("carrot", "long", (235, 120, 40), a, b, 2.5, "extrude", 20.0, (x, y, rot), env, None)


def one_item(spec, plate=PLATE, plane=FLAT, bases=()):
    return render(480, 480, plate, plane, 6.0, [spec], list(bases), 0)


def rect_mask(w, h, angle_deg, shape=(200, 200)):
    ys, xs = np.indices(shape, dtype=float)
    cx, cy = shape[1] / 2 - 0.3, shape[0] / 2 + 0.2
    t = math.radians(angle_deg)
    u = (xs - cx) * math.cos(t) + (ys - cy) * math.sin(t)
    v = -(xs - cx) * math.sin(t) + (ys - cy) * math.cos(t)
    return (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)


def angle_err(a, b):
    return abs((a - b + 90.0) % 180.0 - 90.0)


# ---------------------------------------------------------------- plate

def test_detect_plate_on_generated_scenes():
    for i in range(5):
        sc = generate_scene(SceneConfig(n_items=4), seed=21, index=i)
        p = detect_plate(sc.depth)
        assert abs(p.cx - sc.plate.cx) <= 3 and abs(p.cy - sc.plate.cy) <= 3 and abs(p.r - sc.plate.r) <= 3


def test_flat_depth_has_no_plate():
    with pytest.raises(PlateNotFound):
        detect_plate(np.full((300, 300), 800, np.uint16))


def test_mostly_invalid_depth_has_no_plate():
    d = np.zeros((300, 300), np.uint16)
    d[:50] = 800
    with pytest.raises(PlateNotFound):
        detect_plate(d)


def test_stronger_rim_wins():
    ys, xs = np.indices((480, 640), dtype=float)
    depth = np.full((480, 640), 800.0)
    weak = np.hypot(xs - 170, ys - 240) < 160
    strong = np.hypot(xs - 470, ys - 240) < 160
    depth[weak] -= 4  # shallow rim step
    depth[strong] -= 25
    p = detect_plate(depth.astype(np.uint16), PerceptionParams(r_min=140, r_max=180))
    assert abs(p.cx - 470) <= 3 and abs(p.cy - 240) <= 3 and abs(p.r - 160) <= 3


# ---------------------------------------------------------------- plane

def test_exact_flat_plane():
    depth = np.full((480, 480), 800, np.uint16)
    pl = fit_table_plane(depth, PLATE)
    assert (pl.a, pl.b, pl.c) == pytest.approx((0.0, 0.0, 800.0), abs=1e-9)
    assert pl.rms == pytest.approx(0.0, abs=1e-9)


def test_tilted_plane_recovered():
    ys, xs = np.indices((600, 600), dtype=float)
    depth = 0.1 * xs + 700.0
    pl = fit_table_plane(depth, PlateCircle(300, 300, 200))
    assert pl.a == pytest.approx(0.1, abs=1e-3)
    assert pl.b == pytest.approx(0.0, abs=1e-3)


def test_plane_needs_valid_annulus():
    depth = np.zeros((480, 480), np.uint16)
    depth[200:280, 200:280] = 800
    with pytest.raises(TooFewPixels):
        fit_table_plane(depth, PLATE)


def test_height_map_item_and_invalid():
    sc = one_item(carrot(240, 240))
    depth = sc.depth.copy()
    depth[0, 0] = 0
    h = height_map(depth, fit_table_plane(depth, PLATE))
    assert np.isnan(h[0, 0])
    med = float(np.median(h[sc.items[0].mask]))
    assert 18 <= med <= 22
    table = ~(np.hypot(*(np.indices(h.shape)[::-1] - 240.0)) < 200 * 1.05)
    vals = np.abs(h[table & np.isfinite(h)])
    assert np.percentile(vals, 99) <= 1e-9 + 3 * max(fit_table_plane(depth, PLATE).rms, 0.5)


# ---------------------------------------------------------------- segmentation

def test_empty_plate_segments_nothing():
    sc = render(480, 480, PLATE, FLAT, 6.0, [], [], 0)
    assert segment_items(sc.rgb, PLATE) == []


def test_three_items_segmented():
    specs = [carrot(160, 200), carrot(300, 200, 1.0), carrot(240, 320, 2.0)]
    sc = render(480, 480, PLATE, FLAT, 6.0, specs, [], 0)
    segs = segment_items(sc.rgb, PLATE)
    assert len(segs) == 3
    assert [s.area for s in segs] == sorted((s.area for s in segs), reverse=True)
    for it in sc.items:
        best = max(np.count_nonzero(s.mask & it.mask) / np.count_nonzero(s.mask | it.mask) for s in segs)
        assert best >= 0.8


def test_tiny_components_dropped():
    sc = render(480, 480, PLATE, FLAT, 6.0, [], [], 0)
    rgb = sc.rgb.copy()
    rgb[240:243, 240:243] = (255, 0, 0)
    assert segment_items(rgb, PLATE) == []


def test_segment_bbox_tight_and_centroid():
    sc = one_item(carrot(240.5, 230.5, 0.4))
    (seg,) = segment_items(sc.rgb, PLATE)
    assert seg.bbox == mask_bbox(seg.mask)
    ys, xs = np.nonzero(seg.mask)
    assert seg.centroid == pytest.approx((xs.mean(), ys.mean()))


# ---------------------------------------------------------------- environment

def classify(sc, k=0):
    h = height_map(sc.depth, fit_table_plane(sc.depth, sc.plate))
    return classify_environment(sc.items[k].mask, h, sc.plate)


def test_centred_item_is_iso():
    assert classify(one_item(carrot(240, 240))) == EnvClass.ISO


def test_item_at_rim_is_wall():
    assert classify(one_item(carrot(240, 240 + 200 - 6 - 9 - 2))) == EnvClass.WALL


def test_item_on_base_is_stack():
    spec = carrot(240, 240, env=EnvClass.STACK)
    sc = one_item(spec, bases=[BaseLayer(240, 240, 80, 45)])
    assert classify(sc) == EnvClass.STACK


def test_roi_cells_geometry():
    cells = roi_cells((10, 20, 40, 30), 2.0, 3)
    assert len(cells) == 8
    xs = sorted({c[0] for c in cells})
    assert xs[0] == pytest.approx(-5.0) and max(c[2] for c in cells) == pytest.approx(55.0)


def test_rect_circle_relation_uses_pixel_centres():
    # the half-open cell [10, 20) x [-1, 1) covers pixel centres x = 10..19, y = -1..0
    near, far = rect_circle_relation((10, -1, 20, 1), PlateCircle(0, 0, 15))
    assert near == pytest.approx(10.0)
    assert far == pytest.approx(math.hypot(19, 1))


def test_roi_outside_image_rejected():
    mask = np.zeros((50, 50), bool)
    with pytest.raises(PerceptionError):
        classify_environment(mask, np.zeros((50, 50)), PlateCircle(25, 25, 20))


@pytest.mark.parametrize("sigma", [0.0, 2.0])
def test_generated_labels_reproduced(sigma):
    agree = total = 0
    for i in range(10):
        sc = generate_scene(SceneConfig(n_items=5, noise_sigma=sigma), seed=33, index=i)
        res = perceive(sc.rgb, sc.depth)
        truth = {it.bbox: it.spec.env_label for it in sc.items}
        for it in res.items:
            total += 1
            agree += truth.get(it.segment.bbox) == it.env
    assert total == 50
    assert agree / total >= (1.0 if sigma == 0 else 0.95)


def test_pipeline_deterministic():
    sc = generate_scene(SceneConfig(n_items=3), seed=4)
    a, b = perceive(sc.rgb, sc.depth), perceive(sc.rgb, sc.depth)
    assert [(x.segment.bbox, x.env, x.axis) for x in a.items] == [(x.segment.bbox, x.env, x.axis) for x in b.items]


# ---------------------------------------------------------------- axis

def test_axis_of_axis_aligned_rectangle():
    ax = skewering_axis(rect_mask(40, 10, 0))
    assert angle_err(ax.angle_deg, 0.0) <= 1.0
    ys, xs = np.nonzero(rect_mask(40, 10, 0))
    mid = ((ax.p0[0] + ax.p1[0]) / 2, (ax.p0[1] + ax.p1[1]) / 2)
    assert mid == pytest.approx((xs.mean(), ys.mean()), abs=1e-6)


def test_axis_of_rotated_rectangle():
    assert angle_err(skewering_axis(rect_mask(40, 10, 30)).angle_deg, 30.0) <= 2.0


def test_axis_of_disk_passes_through_centre():
    ys, xs = np.indices((60, 60))
    disk = np.hypot(xs - 30, ys - 30) <= 15
    ax = skewering_axis(disk)
    assert ((ax.p0[0] + ax.p1[0]) / 2, (ax.p0[1] + ax.p1[1]) / 2) == pytest.approx((30, 30), abs=1e-6)


def test_axis_single_pixel_rejected():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    with pytest.raises(DegenerateMask):
        skewering_axis(m)


def test_axis_collinear_pixels_ok():
    m = np.zeros((5, 20), bool)
    m[2, 3:15] = True
    ax = skewering_axis(m)
    assert ax.p0 != ax.p1
    assert angle_err(ax.angle_deg, 0.0) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 180), st.floats(2.0, 4.0))
def test_axis_equivariant_and_inside_bbox(theta, elong):
    m = rect_mask(12 * elong, 12, theta)
    ax = skewering_axis(m)
    assert angle_err(ax.angle_deg, theta) <= 2.0
    x0, y0, x1, y1 = mask_bbox(m)
    for px, py in (ax.p0, ax.p1):
        assert x0 - 1 <= px <= x1 and y0 - 1 <= py <= y1
    assert (ax.p0[0], ax.p0[1]) <= (ax.p1[0], ax.p1[1])


def test_axis_on_rendered_items():
    rng = np.random.default_rng(0)
    for k in range(12):
        spec = random_item("celery", SceneEnv.ISO, rng)
        spec.pose = (240.3, 239.6, math.radians(15 * k))
        sc = one_item(spec)
        (p,) = perceive(sc.rgb, sc.depth).items
        assert angle_err(p.axis.angle_deg, 15 * k) <= 2.0
