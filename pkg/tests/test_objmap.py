import math

import numpy as np
import pytest

from semexplore.geometry import CameraModel, RigidTransform, camera_pose
from semexplore.objmap import (FG_GATE_CODE, FG_PRIOR_CODE, FLOAT_VOXEL, MEMORY_REDUCTION,
                               QUANTIZED_VOXEL, ClassTable, Detection, ObjectMapConfig,
                               ObjectStore, ObjectSubmap, box_overlap, decode_fg, decode_tsdf,
                               encode_fg, encode_tsdf, mask_iou, match_contained,
                               match_detections, min_mask_pixels, touches_border)
from semexplore.plyio import read_ply

CAM = CameraModel()


# -- quantization ----------------------------------------------------------------------

def test_tsdf_codes_exhaustive_and_random():
    q = np.arange(-32768, 32768, dtype=np.int32)
    x = decode_tsdf(q.astype(np.int16))
    back = encode_tsdf(x)
    # every code inside the clamp range survives, the extra negative code clamps to -1
    np.testing.assert_array_equal(back[1:], q[1:].astype(np.int16))
    assert back[0] == -32767
    rng = np.random.default_rng(0)
    r = rng.uniform(-1, 1, 10**6)
    assert np.max(np.abs(decode_tsdf(encode_tsdf(r)) - r)) <= 1 / 32767
    assert encode_tsdf(5.0) == 32767 and encode_tsdf(-5.0) == -32767


def test_fg_codes_exhaustive_and_random():
    q = np.arange(256, dtype=np.uint8)
    np.testing.assert_array_equal(encode_fg(decode_fg(q)), q)
    rng = np.random.default_rng(1)
    r = rng.uniform(0, 1, 10**6)
    assert np.max(np.abs(decode_fg(encode_fg(r)) - r)) <= 1 / 255
    assert decode_fg(FG_GATE_CODE) > 0.5 >= decode_fg(FG_GATE_CODE - 1)
    assert decode_fg(FG_PRIOR_CODE) == pytest.approx(0.5, abs=1 / 255)
    assert FG_PRIOR_CODE < FG_GATE_CODE


def test_voxel_layout_sizes():
    assert QUANTIZED_VOXEL.itemsize == 7 and FLOAT_VOXEL.itemsize == 12
    assert MEMORY_REDUCTION == pytest.approx(5 / 12)
    assert MEMORY_REDUCTION >= 0.39


def test_class_table_and_detection_filter():
    t = ClassTable({"chair": 0.02, "table": 0.03})
    assert t.resolution("table") == 0.03 and "chair" in t and "sofa" not in t
    with pytest.raises(KeyError):
        t.resolution("sofa")
    with pytest.raises(ValueError):
        ClassTable({"chair": 0.0})
    assert min_mask_pixels(CAM) == 50
    assert min_mask_pixels(CameraModel(width=640, height=480, fx=525, fy=525)) == 200


# -- matching ---------------------------------------------------------------------------

def rect(h, w, v0, v1, u0, u1):
    m = np.zeros((h, w), dtype=bool)
    m[v0:v1, u0:u1] = True
    return m


def iou_by_counts(a, b):
    inter = sum(1 for v in range(a.shape[0]) for u in range(a.shape[1]) if a[v, u] and b[v, u])
    union = sum(1 for v in range(a.shape[0]) for u in range(a.shape[1]) if a[v, u] or b[v, u])
    return inter / union if union else 0.0


def test_mask_iou_matches_pixel_count_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = rng.random((12, 15)) < 0.4, rng.random((12, 15)) < 0.4
        assert mask_iou(a, b) == pytest.approx(iou_by_counts(a, b), abs=1e-15)
    z = np.zeros((4, 4), bool)
    assert mask_iou(z, z) == 0.0


def test_match_prefers_higher_iou_and_thresholds():
    H, W = 20, 20
    obj1 = rect(H, W, 0, 10, 0, 10)        # 100 px
    obj2 = rect(H, W, 0, 10, 4, 14)        # 100 px, overlaps obj1 in 60 px
    det = rect(H, W, 0, 10, 0, 10)         # identical to obj1
    res = match_detections([Detection(det, "c")], {1: obj1, 2: obj2})
    assert res.assignments == [(0, 1, 1.0)] and res.new == []
    # IoU(det, obj2) = 60/140 < 0.5 -> new object when obj1 is absent
    res = match_detections([Detection(det, "c")], {2: obj2})
    assert res.assignments == [] and res.new == [0]
    # exactly 0.5 is not a match
    half = rect(H, W, 0, 10, 0, 5)
    assert mask_iou(half, obj1) == 0.5
    assert match_detections([half], {1: obj1}).new == [0]
    with pytest.raises(ValueError):
        match_detections([np.zeros((3, 3), bool)], {1: obj1})


def test_match_is_one_to_one():
    H, W = 10, 40
    obj = rect(H, W, 0, 10, 0, 10)
    d1 = rect(H, W, 0, 10, 0, 9)           # IoU .9
    d2 = rect(H, W, 0, 10, 0, 8)           # IoU .8
    res = match_detections([d2, d1], {7: obj})
    assert res.assignments == [(1, 7, pytest.approx(0.9))]
    assert res.new == [0]


# -- analytic sphere frames -------------------------------------------------------------

CENTRE = np.array([2.0, 0.0, 1.0])
RADIUS = 0.3


def sphere_frame(T: RigidTransform, cam=CAM, centre=CENTRE, radius=RADIUS):
    rays = cam.pixel_rays()
    dirs = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    dw = T.rotate(dirs.reshape(-1, 3))
    oc = T.translation - centre
    b = dw @ oc
    disc = b * b - (oc @ oc - radius * radius)
    t = np.where(disc > 0, -b - np.sqrt(np.maximum(disc, 0)), np.inf)
    z = (t * dirs.reshape(-1, 3)[:, 2]).reshape(cam.height, cam.width)
    mask = np.isfinite(z) & (z > 0)
    depth = np.where(mask, z, 0.0)
    colour = np.zeros((cam.height, cam.width, 3), np.uint8)
    colour[mask] = (10, 200, 30)
    return depth, colour, mask


def sphere_poses():
    out = []
    for yaw in np.linspace(0, 2 * np.pi, 12, endpoint=False):
        pos = CENTRE - 1.0 * np.array([math.cos(yaw), math.sin(yaw), 0.0])
        out.append(camera_pose(pos, yaw))
    return out


def build_sphere_store(res=0.02):
    store = ObjectStore(ClassTable({"ball": res}))
    for k, T in enumerate(sphere_poses()):
        depth, colour, mask = sphere_frame(T)
        store.process_frame(depth, colour, [Detection(mask, "ball")], T, CAM)
    return store


@pytest.fixture(scope="module")
def sphere_store():
    return build_sphere_store()


def test_sphere_is_one_object_with_accurate_mesh(sphere_store, tmp_path):
    assert len(sphere_store) == 1
    sm = next(iter(sphere_store))
    verts, faces = sm.extract_surface()
    assert len(faces) > 100
    err = np.linalg.norm(verts - CENTRE, axis=1) - RADIUS
    assert math.sqrt(np.mean(err ** 2)) <= 0.01
    pts, owners, obs = sphere_store.surface_points()
    assert np.all(owners == sm.id)
    assert np.all(np.abs(np.linalg.norm(pts - CENTRE, axis=1) - RADIUS) <= 0.02 * math.sqrt(3))
    assert np.all(obs <= 1.0 + 0.02)
    (p,) = sphere_store.export_ply(tmp_path)
    v, c, f = read_ply(p)
    np.testing.assert_allclose(v, verts, atol=1e-5)
    assert np.all(c == (10, 200, 30))


def test_mesh_only_spans_observed_foreground():
    sm = ObjectSubmap(1, "ball", 0.1, [0, 0, 0], [0.6, 0.6, 0.6])
    sm.tsdf[...] = encode_tsdf(np.where(np.arange(6) < 3, -0.5, 0.5))[None, None, :]
    sm.fg[...] = 255
    sm.weight[...] = 0
    sm.weight[1:4, 1:4, :] = 1
    verts, faces = sm.extract_surface()
    ijk = (verts - sm.origin) / sm.resolution - 0.5
    assert len(faces) == 8
    assert ijk[:, :2].min() >= 1 - 1e-9 and ijk[:, :2].max() <= 3 + 1e-9
    np.testing.assert_allclose(ijk[:, 2], 2.5)


def test_render_masks_reproduce_the_sphere(sphere_store):
    T = sphere_poses()[3]
    _, _, mask = sphere_frame(T)
    (oid, rendered), = sphere_store.render_masks(T, CAM).items()
    assert mask_iou(mask, rendered) > 0.9
    assert ObjectStore(ClassTable({"ball": 0.02})).render_masks(T, CAM) == {}


def test_undetected_view_leaves_fg_untouched():
    store = build_sphere_store(res=0.04)
    sm = next(iter(store))
    fg0, w0 = sm.fg.copy(), sm.weight.copy()
    T = camera_pose(CENTRE - [0.8, 0.0, 0.0], 0.0)
    depth, colour, _ = sphere_frame(T)
    rep = store.process_frame(depth, colour, [], T, CAM)
    assert rep.undetected == [sm.id] and rep.matched == [] and rep.created == []
    np.testing.assert_array_equal(sm.fg, fg0)
    assert np.any(sm.weight != w0)


def test_small_and_unmatched_detections():
    store = build_sphere_store(res=0.04)
    T = sphere_poses()[0]
    depth, colour, mask = sphere_frame(T)
    tiny = np.zeros_like(mask)
    tiny[0:5, 0:5] = True                                # 25 px is below the size floor
    far = np.zeros_like(mask)
    far[190:230, 5:45] = True                           # off the image border
    depth2 = depth.copy()
    depth2[far] = 3.0
    rep = store.process_frame(depth2, colour, [Detection(mask, "ball"), Detection(tiny, "ball"),
                                               Detection(far, "ball")], T, CAM)
    assert [m[1] for m in rep.matched] == [1]
    assert rep.created == [2] and len(store) == 2
    with pytest.raises(KeyError):
        store.process_frame(depth, colour, [Detection(mask, "sofa")], T, CAM)


def test_background_bleed_is_gated_out():
    """Pixels rendered as the object but not detected get fg evidence 0."""
    cfg = ObjectMapConfig()
    store = ObjectStore(ClassTable({"ball": 0.04}), cfg)
    T = sphere_poses()[0]
    depth, colour, mask = sphere_frame(T)
    # the first detection bleeds onto a wall 0.2 m behind the sphere
    bleed = np.zeros_like(mask)
    vv, uu = np.nonzero(mask)
    bleed[vv.min():vv.max() + 1, uu.max() + 1:uu.max() + 6] = True
    depth_b = depth.copy()
    depth_b[bleed] = depth[mask].max() + 0.05
    store.process_frame(depth_b, colour, [Detection(mask | bleed, "ball")], T, CAM)
    sm = next(iter(store))
    for _ in range(4):
        store.integrate_object(sm, depth_b, colour, mask, T, CAM, True,
                               rendered_mask=mask | bleed)
    pw = T.apply(np.stack([(uu.max() + 3 - CAM.cx) / CAM.fx, 0.0, 1.0]) * depth_b[
        int(CAM.cy), uu.max() + 3])
    ijk = np.floor((pw - sm.origin) / sm.resolution).astype(int)
    assert not sm.foreground_mask()[tuple(ijk)]


def test_submap_growth_keeps_data():
    sm = ObjectSubmap(1, "ball", 0.05, [0, 0, 0], [0.2, 0.2, 0.2])
    sm.tsdf[1, 1, 1] = 123
    sm.weight[1, 1, 1] = 3
    assert sm.ensure_contains(np.array([-0.1, 0, 0]), np.array([0.3, 0.2, 0.2]))
    i = np.rint((np.array([0.075, 0.075, 0.075]) - sm.origin) / 0.05 - 0.5).astype(int)
    assert sm.tsdf[tuple(i)] == 123 and sm.weight[tuple(i)] == 3
    assert sm.fg[0, 0, 0] == FG_PRIOR_CODE
    assert not sm.ensure_contains(np.array([0, 0, 0]), np.array([0.1, 0.1, 0.1]))
    assert sm.nbytes() == 7 * sm.tsdf.size


def test_border_masks_do_not_seed_objects():
    store = ObjectStore(ClassTable({"ball": 0.04}))
    T = camera_pose(CENTRE - [0.8, 0.45, 0.0], 0.0)      # sphere cut by the left edge
    depth, colour, mask = sphere_frame(T)
    assert mask[:, 0].any() and touches_border(mask)
    rep = store.process_frame(depth, colour, [Detection(mask, "ball")], T, CAM)
    assert rep.created == [] and rep.truncated == [0] and len(store) == 0
    store = ObjectStore(ClassTable({"ball": 0.04}), ObjectMapConfig(create_from_border=True))
    assert store.process_frame(depth, colour, [Detection(mask, "ball")], T, CAM).created == [1]


def test_containment_fallback_absorbs_growing_view():
    rendered = {4: rect(20, 20, 5, 10, 5, 10), 6: rect(20, 20, 5, 10, 5, 10)}
    big = Detection(rect(20, 20, 2, 14, 2, 14), "ball")  # IoU 25/144 but holds the mask
    assert match_detections([big], rendered).new == [0]
    classes = {4: "cup", 6: "ball"}
    assert match_contained([big], rendered, classes, [0], set(), 0.8) == [(0, 6, 1.0)]
    assert match_contained([big], rendered, classes, [0], {6}, 0.8) == []
    side = Detection(rect(20, 20, 5, 10, 8, 20), "ball")  # holds 2/5 of the mask
    assert match_contained([side], rendered, classes, [0], set(), 0.8) == []


def test_footprint_render_equals_casting_every_pixel(sphere_store):
    rays = CAM.pixel_rays().reshape(-1, 3)
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    poses = sphere_poses()[::3] + [camera_pose(CENTRE - [d, 0.1, 0.2 * d], 0.3)
                                   for d in (0.35, 0.5, 2.0, 5.0)]
    for T in poses:
        ids, _, _ = sphere_store.raycast(T.translation, T.rotate(rays), CAM.d_max)
        for oid, m in sphere_store.render_masks(T, CAM).items():
            np.testing.assert_array_equal(m, (ids == oid).reshape(m.shape))


def test_duplicate_submaps_merge_into_the_older():
    full = build_sphere_store(res=0.04)
    ref = next(iter(full))
    # two halves of the sphere seen as separate objects, plus an unrelated ball
    store = ObjectStore(ClassTable({"ball": 0.04}))
    poses = sphere_poses()
    for k in (0, 1, 2, 3):
        d, c, m = sphere_frame(poses[k])
        store.integrate_object(store.submaps.get(1) or store.create("ball", d, m, poses[k], CAM),
                               d, c, m, poses[k], CAM, True)
    for k in (6, 7, 8, 9):
        d, c, m = sphere_frame(poses[k])
        sm = store.submaps.get(2) or store.create("ball", d, m, poses[k], CAM)
        store.integrate_object(sm, d, c, m, poses[k], CAM, True)
    other_centre = CENTRE + [0.0, 3.0, 0.0]
    T = camera_pose(other_centre - [1.0, 0.0, 0.0], 0.0)
    d, c, m = sphere_frame(T, centre=other_centre)
    store.integrate_object(store.create("ball", d, m, T, CAM), d, c, m, T, CAM, True)
    assert sorted(store.submaps) == [1, 2, 3]
    # halves seen from opposite sides fill the same box; the far ball does not
    assert store.merge_duplicates([3]) == []
    a, b = store.submaps[1], store.submaps[2]
    w_sum = a.weight.sum() + b.weight.sum()
    assert store.merge_duplicates([2]) == [(1, 2)]
    assert sorted(store.submaps) == [1, 3]
    merged = store.submaps[1]
    assert merged.weight.sum() <= w_sum
    verts, _ = merged.extract_surface()
    err = np.linalg.norm(verts - CENTRE, axis=1) - RADIUS
    assert math.sqrt(np.mean(err ** 2)) <= 0.02
    assert np.ptp(verts[:, 0]) > 1.5 * RADIUS


def test_absorb_is_weighted_fusion_on_the_shared_lattice():
    a = ObjectSubmap(1, "ball", 0.1, [0, 0, 0], [0.3, 0.3, 0.3])
    b = ObjectSubmap(2, "ball", 0.1, [0.2, 0, 0], [0.5, 0.3, 0.3])
    a.tsdf[2, 1, 1], a.weight[2, 1, 1], a.fg[2, 1, 1] = encode_tsdf(0.6), 3, 255
    b.tsdf[0, 1, 1], b.weight[0, 1, 1], b.fg[0, 1, 1] = encode_tsdf(-0.2), 1, 0
    b.tsdf[2, 1, 1], b.weight[2, 1, 1] = encode_tsdf(0.1), 2
    a.absorb(b)
    assert a.shape == (5, 3, 3)
    assert decode_tsdf(a.tsdf[2, 1, 1]) == pytest.approx((0.6 * 3 - 0.2) / 4, abs=1e-4)
    assert decode_fg(a.fg[2, 1, 1]) == pytest.approx(0.75, abs=1 / 255)
    assert a.weight[2, 1, 1] == 4
    assert a.weight[4, 1, 1] == 2 and decode_tsdf(a.tsdf[4, 1, 1]) == pytest.approx(0.1, abs=1e-4)
    assert a.fg[0, 0, 0] == FG_PRIOR_CODE and a.weight[0, 0, 0] == 0


def test_box_overlap():
    unit = (np.zeros(3), np.ones(3))
    assert box_overlap(unit, unit) == 1.0
    assert box_overlap(unit, (np.full(3, 0.5), np.full(3, 3.0))) == pytest.approx(0.125)
    assert box_overlap(unit, (np.array([0.25, 0.25, 0.25]), np.full(3, 0.75))) == 1.0
    assert box_overlap(unit, (np.array([1.0, 0, 0]), np.array([2.0, 1, 1]))) == 0.0
