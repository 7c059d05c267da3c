import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semexplore.geometry import CameraModel, RigidTransform, camera_pose, yaw_matrix
from semexplore.harness import resolve_scene
from semexplore.occmap import (OccupancyMap, OutOfBoundsError, SensorModel, VoxelState,
                               binary_entropy)
from semexplore.plyio import read_ply
from semexplore.simulator import load_scene, render

CAM = CameraModel()
RES = 0.04


def empty_map(lo=(-0.2, -0.2, -0.2), hi=(4.2, 4.2, 3.2), res=RES):
    return OccupancyMap(lo, hi, res)


def centre_pixel_frame(d):
    depth = np.zeros((CAM.height, CAM.width))
    depth[120, 160] = d
    colour = np.zeros((CAM.height, CAM.width, 3), dtype=np.uint8)
    colour[120, 160] = (200, 100, 50)
    return depth, colour


def dense_ray_voxels(m, origin, direction, t0, t1, step=2e-5):
    """Independent oracle: every leaf touched by the ray, by dense sampling."""
    t = np.arange(t0, t1, step)
    p = origin + t[:, None] * direction
    idx = np.floor((p - m.bounds_min) / m.resolution).astype(int)
    return {tuple(v) for v in np.unique(idx, axis=0)}


def room_scene():
    return load_scene(resolve_scene("room"))


# -- sensor model and classification --------------------------------------------------

def test_sensor_thresholds_and_single_observation():
    s = SensorModel()
    assert s.occ_threshold == pytest.approx(math.log(3))
    assert s.free_threshold == pytest.approx(-math.log(3))
    assert s.l_occ > s.occ_threshold and s.l_free < s.free_threshold


def test_fresh_map():
    m = empty_map()
    assert m.classify((1, 1, 1)) == VoxelState.UNKNOWN
    assert m.occupancy_probability((1, 1, 1)) == 0.5
    assert m.frontier_count == 0 and len(m.frontiers()) == 0
    assert m.explored_volume() == 0
    with pytest.raises(OutOfBoundsError):
        m.classify((5, 1, 1))
    with pytest.raises(ValueError):
        OccupancyMap((0, 0, 0), (0, 1, 1), 0.1)


def test_tristate_total():
    m = empty_map()
    rng = np.random.default_rng(0)
    m.log_odds[...] = rng.uniform(-3, 3, m.dims).astype(np.float32)
    st_ = m.states()
    assert set(np.unique(st_)) <= {0, 1, 2}
    assert np.count_nonzero(m.free_mask() & m.occupied_mask()) == 0
    for _ in range(50):
        i = tuple(rng.integers(0, d) for d in m.dims)
        assert m.classify_index(i) == st_[i]


# -- integration --------------------------------------------------------------------------

def test_invalid_depth_leaves_map_unchanged():
    m = empty_map()
    T = camera_pose([2, 2, 1.5], 0.0)
    bad = np.full((240, 320), np.nan)
    bad[:10] = 0.0
    bad[10:20] = -1.0
    bad[20:30] = 20.0
    bad[30:40] = 0.05
    for method in ("projective", "raycast"):
        s = m.integrate_frame(bad, np.zeros((240, 320, 3), np.uint8), T, CAM, method=method)
        assert s.n_updated == 0
    assert not m.log_odds.any() and not m.weight.any()
    with pytest.raises(ValueError):
        m.integrate_frame(np.zeros((10, 10)), np.zeros((10, 10, 3)), T, CAM)
    with pytest.raises(ValueError):
        m.integrate_frame(np.zeros((240, 320)), np.zeros((24, 32, 3)), T, CAM)


def test_single_pixel_ray_matches_dda_oracle():
    m = empty_map()
    pos = np.array([1.013, 1.527, 1.291])
    T = camera_pose(pos, 0.37)
    depth, colour = centre_pixel_frame(2.0)
    m.integrate_frame(depth, colour, T, CAM, method="raycast")
    d = T.rotate([0, 0, 1.0])
    band = m.sensor.band_voxels * RES
    free = dense_ray_voxels(m, pos, d, CAM.d_min, 2.0 - band)
    occ = dense_ray_voxels(m, pos, d, 2.0 - band, 2.0 + band)
    updated = {tuple(v) for v in np.argwhere(m.weight > 0)}
    assert updated == free | occ
    hit = m.point_to_index(pos + 2.0 * d)
    assert m.classify_index(hit) == VoxelState.OCCUPIED
    assert abs(m.min_obs_dist[hit] - 2.0) <= math.sqrt(3) * RES / 2 + 1e-6
    assert tuple(m.colour[hit]) == (200, 100, 50)
    for v in free - occ:
        assert m.classify_index(v) == VoxelState.FREE
        assert tuple(m.colour[v]) == (0, 0, 0)


@pytest.mark.parametrize("method", ["projective", "raycast"])
def test_repeat_frame_is_idempotent_in_class_and_colour(method):
    sc = room_scene()
    T = camera_pose([1.0, 1.3, 1.2], 0.4)
    fr = render(sc, T, CAM)
    m = empty_map()
    m.integrate_frame(fr.depth, fr.colour, T, CAM, method=method)
    st1, col1 = m.states(), m.colour.copy()
    m.integrate_frame(fr.depth, fr.colour, T, CAM, method=method)
    np.testing.assert_array_equal(m.states(), st1)
    np.testing.assert_array_equal(m.colour, col1)


@pytest.mark.parametrize("method", ["projective", "raycast"])
def test_single_frame_free_before_occupied_at_wall(method):
    sc = room_scene()
    T = camera_pose([1.0, 2.0, 1.5], 0.0)     # facing the east wall at x = 4
    fr = render(sc, T, CAM)
    m = empty_map()
    m.integrate_frame(fr.depth, fr.colour, T, CAM, method=method)
    assert m.classify((2.5, 2.0, 1.5)) == VoxelState.FREE
    assert m.classify((3.9, 2.0, 1.5)) == VoxelState.FREE
    assert m.classify((4.01, 2.0, 1.5)) == VoxelState.OCCUPIED
    assert m.classify((4.15, 2.0, 1.5)) == VoxelState.UNKNOWN
    np.testing.assert_array_equal(np.sort(m.frontiers()), m.brute_force_frontiers())


def test_min_obs_dist_monotone():
    sc = room_scene()
    m = empty_map()
    rng = np.random.default_rng(3)
    prev = m.min_obs_dist.copy()
    for _ in range(6):
        T = camera_pose(rng.uniform([0.5, 0.5, 0.5], [3.5, 3.5, 2.5]), rng.uniform(-np.pi, np.pi))
        fr = render(sc, T, CAM)
        m.integrate_frame(fr.depth, fr.colour, T, CAM)
        assert np.all(m.min_obs_dist <= prev)
        prev = m.min_obs_dist.copy()
    assert np.isfinite(prev).any()


def test_set_free_sphere():
    m = empty_map()
    m.set_free_sphere([2, 2, 1.5], 0.3)
    assert m.classify((2, 2, 1.5)) == VoxelState.FREE
    assert m.classify((2, 2, 1.9)) == VoxelState.UNKNOWN
    assert m.frontier_count > 0
    np.testing.assert_array_equal(m.frontiers(), m.brute_force_frontiers())


# -- frontiers --------------------------------------------------------------------------------

def test_is_frontier_definition():
    m = OccupancyMap((0, 0, 0), (0.5, 0.5, 0.5), 0.1)
    free, occ = m.sensor.l_min, m.sensor.l_max
    m.log_odds[...] = free
    assert not m.is_frontier((2, 2, 2))
    m.log_odds[2, 2, 3] = 0.0
    assert m.is_frontier((2, 2, 2))
    m.log_odds[2, 2, 2] = occ
    assert not m.is_frontier((2, 2, 2))
    # diagonal unknowns do not count
    m.log_odds[...] = free
    m.log_odds[3, 3, 3] = 0.0
    assert not m.is_frontier((2, 2, 2))


def _random_box_world(rng):
    from semexplore.simulator import Box, Instance, Scene
    boxes = [Box.from_min_max(*sorted_pair(rng)) for _ in range(6)]
    inst = [Instance(1, None, (180, 180, 180), boxes, [])]
    return Scene(np.array([-0.2, -0.2, -0.2]), np.array([3.2, 3.2, 2.2]), inst,
                 np.array([1.5, 1.5, 1.0]), 0.0)


def sorted_pair(rng):
    a = rng.uniform([-0.2, -0.2, -0.2], [3.0, 3.0, 2.0])
    b = a + rng.uniform(0.1, 1.0, 3)
    return a, b


@settings(max_examples=4, deadline=None)
@given(st.integers(0, 10_000))
def test_incremental_frontiers_equal_brute_force(seed):
    rng = np.random.default_rng(seed)
    sc = _random_box_world(rng)
    m = OccupancyMap(sc.bounds_min, sc.bounds_max, 0.05)
    small = CameraModel(width=80, height=60, fx=65.625, fy=65.625)
    for f in range(12):
        T = camera_pose(rng.uniform(sc.bounds_min + 0.2, sc.bounds_max - 0.2),
                        rng.uniform(-np.pi, np.pi))
        fr = render(sc, T, small)
        method = "projective" if f % 2 else "raycast"
        m.integrate_frame(fr.depth, fr.colour, T, small, method=method)
        np.testing.assert_array_equal(m.frontiers(), m.brute_force_frontiers())
        assert m.frontier_count == len(m.frontiers())


def _pitched_pose(pos, yaw, pitch):
    """Camera pose looking along (yaw, pitch); pitch > 0 looks up."""
    base = camera_pose(pos, 0.0).rotation
    # rotate about the body y axis (world y at yaw 0) by -pitch, then yaw
    c, s = math.cos(-pitch), math.sin(-pitch)
    ry = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return RigidTransform(yaw_matrix(yaw) @ ry @ base, pos)


def test_full_coverage_of_closed_room_empties_frontiers():
    sc = room_scene()
    m = empty_map()
    poses = []
    for x in (0.7, 2.0, 3.3):
        for y in (0.7, 2.0, 3.3):
            for z in (0.6, 1.5, 2.4):
                for yaw in np.arange(0, 2 * np.pi, np.pi / 4):
                    for pitch in (-1.0, 0.0, 1.0):
                        poses.append(_pitched_pose(np.array([x, y, z]), yaw, pitch))
    for T in poses:
        fr = render(sc, T, CAM)
        m.integrate_frame(fr.depth, fr.colour, T, CAM)
    assert len(m.brute_force_frontiers()) == 0
    assert m.frontier_count == 0
    # interior is free and every wall is closed by occupied leaves
    assert m.classify((2, 2, 1.5)) == VoxelState.FREE
    assert m.classify((2, 2, 3.01)) == VoxelState.OCCUPIED


# -- raycasts ------------------------------------------------------------------------------------

def entropy_oracle(m, origin, d, cam):
    n = int(math.ceil((cam.d_max - cam.d_min) / m.resolution - 1e-9))
    acc = 0.0
    for s in range(n):
        p = origin + d * (cam.d_min + s * m.resolution)
        if not m.contains(p):
            break
        idx = m.point_to_index(p)
        if m.classify_index(idx) == VoxelState.OCCUPIED:
            break
        acc += float(binary_entropy(1 / (1 + math.exp(-float(m.log_odds[idx])))))
    return acc / n


def test_entropy_examples():
    m = OccupancyMap((-1, -1, -1), (11, 1, 1), 0.04)
    o = np.array([0.0, 0.013, 0.007])
    d = np.array([[1.0, 0, 0]])
    assert m.raycast_entropy(o, d, CAM)[0] == pytest.approx(1.0, abs=1e-9)
    m.log_odds[...] = m.sensor.l_min
    p = 1 / (1 + math.exp(-m.sensor.l_min))
    assert m.raycast_entropy(o, d, CAM)[0] == pytest.approx(float(binary_entropy(p)), rel=1e-9)
    assert m.raycast_entropy(o, d, CAM)[0] <= 0.02
    m.log_odds[...] = 0.0
    mid = (CAM.d_min + CAM.d_max) / 2
    m.log_odds[m.point_to_index(o + mid * d[0])] = m.sensor.l_max
    e = m.raycast_entropy(o, d, CAM)[0]
    assert e == pytest.approx(entropy_oracle(m, o, d[0], CAM), abs=1e-12)
    assert e == pytest.approx(0.5, abs=0.01)


def test_entropy_fuzzed_matches_oracle_and_is_bounded():
    rng = np.random.default_rng(5)
    m = OccupancyMap((-2, -2, -2), (2, 2, 2), 0.1)
    m.log_odds[...] = rng.uniform(-7, 7, m.dims).astype(np.float32)
    m.log_odds[rng.random(m.dims) < 0.7] = 0.0
    dirs = rng.normal(size=(40, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    o = np.array([0.01, 0.02, 0.03])
    e = m.raycast_entropy(o, dirs, CAM)
    assert np.all((e >= 0) & (e <= 1))
    for k in range(len(dirs)):
        assert e[k] == pytest.approx(entropy_oracle(m, o, dirs[k], CAM), abs=1e-12)


def test_first_hit():
    m = OccupancyMap((-1, -1, -1), (5, 1, 1), 0.1)
    o = np.array([0.0, 0.01, 0.02])
    d = np.array([[1.0, 0.05, 0.0]])
    d /= np.linalg.norm(d)
    idx, t, obs = m.raycast_first_hit(o, d, 10.0)
    assert idx[0] == -1 and np.isinf(t[0])
    a = m.point_to_index(o + 2.0 * d[0])
    b = m.point_to_index(o + 3.0 * d[0])
    m.log_odds[a] = m.log_odds[b] = m.sensor.l_max
    m.min_obs_dist[a] = 1.7
    idx, t, obs = m.raycast_first_hit(o, d, 10.0)
    assert idx[0] == np.ravel_multi_index(a, m.dims)
    # analytic slab entry distance of the ray into voxel a
    lo = m.index_to_center(a) - 0.05
    hi = lo + 0.1
    with np.errstate(divide="ignore"):
        t1, t2 = (lo - o) / d[0], (hi - o) / d[0]
    t_entry = np.max(np.minimum(t1, t2))
    assert abs(t[0] - t_entry) < 1e-9
    assert abs(t[0] - 2.0) <= math.sqrt(3) * 0.1
    assert obs[0] == pytest.approx(1.7)
    # beyond t_max: miss
    assert m.raycast_first_hit(o, d, 1.5)[0][0] == -1


def brute_segment_free(m, a, b, r):
    c = m.index_to_center(np.stack(np.meshgrid(*[np.arange(n) for n in m.dims],
                                               indexing="ij"), -1))
    ab = b - a
    t = np.clip(((c - a) @ ab) / max(ab @ ab, 1e-300), 0, 1)
    dist = np.linalg.norm(c - (a + t[..., None] * ab), axis=-1)
    near = dist <= r
    # the sphere must also stay inside the map
    lo_ok = np.all(np.minimum(a, b) - r >= m.bounds_min - m.resolution / 2)
    hi_ok = np.all(np.maximum(a, b) + r <= m.bounds_max + m.resolution / 2)
    return bool(lo_ok and hi_ok and np.all(m.free_mask()[near]))


def test_segment_collision_examples():
    m = OccupancyMap((0, 0, 0), (2, 2, 2), 0.05)
    a, b = np.array([0.5, 0.5, 1.0]), np.array([1.5, 1.4, 1.0])
    assert not m.segment_collision_free(a, b, 0.125)          # unknown
    m.set_free_sphere([1, 1, 1], 0.99)
    assert m.segment_collision_free(a, b, 0.125)
    m.log_odds[m.point_to_index([1.0, 0.95 + 0.1, 1.0])] = m.sensor.l_max
    assert not m.segment_collision_free(a, b, 0.125)
    assert m.segment_collision_free(a + [0, 0, 0.3], b + [0, 0, 0.3], 0.125)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_segment_collision_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = OccupancyMap((0, 0, 0), (1, 1, 1), 0.1)
    m.log_odds[...] = m.sensor.l_min
    m.log_odds[rng.random(m.dims) < 0.03] = m.sensor.l_max
    m.log_odds[rng.random(m.dims) < 0.03] = 0.0
    a, b = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    r = float(rng.uniform(0.02, 0.15))
    assert m.segment_collision_free(a, b, r) == brute_segment_free(m, a, b, r)


# -- node bounds ------------------------------------------------------------------------------

def test_node_bounds_enclose_leaves():
    rng = np.random.default_rng(2)
    m = OccupancyMap((0, 0, 0), (1.1, 0.7, 0.5), 0.1)
    m.log_odds[...] = rng.uniform(-7, 7, m.dims).astype(np.float32)
    for level in range(1, m.depth + 1):
        lo, hi = m.node_bounds(level)
        f = 2 ** level
        for idx in np.ndindex(lo.shape):
            sl = tuple(slice(i * f, (i + 1) * f) for i in idx)
            leaves = m.log_odds[sl]
            assert lo[idx] <= leaves.min() and hi[idx] >= leaves.max()
            s = m.node_state(level, idx)
            if s is not None:
                assert all(m.classify_index(tuple(np.add(v, [q.start for q in sl]))) == s
                           for v in np.ndindex(leaves.shape))
    assert m.node_bounds(m.depth)[0].shape == (1, 1, 1)


# -- export and snapshot --------------------------------------------------------------------

def test_snapshot_and_ply_roundtrip(tmp_path):
    sc = room_scene()
    m = empty_map()
    T = camera_pose([2, 2, 1.5], 1.0)
    fr = render(sc, T, CAM)
    m.integrate_frame(fr.depth, fr.colour, T, CAM)
    m.save(tmp_path / "m.map")
    n = OccupancyMap.load(tmp_path / "m.map")
    for name in ("log_odds", "weight", "colour", "min_obs_dist"):
        np.testing.assert_array_equal(getattr(n, name), getattr(m, name))
    np.testing.assert_array_equal(n.frontiers(), m.frontiers())
    assert n.sensor == m.sensor
    (tmp_path / "bad.map").write_bytes(b"NOTAMAP!" + bytes(200))
    with pytest.raises(ValueError):
        OccupancyMap.load(tmp_path / "bad.map")
    m.export_ply(tmp_path / "bg.ply")
    v, c, f = read_ply(tmp_path / "bg.ply")
    occ = np.flatnonzero(m.occupied_mask())
    np.testing.assert_allclose(v, m.flat_to_center(occ), atol=1e-6)
    np.testing.assert_array_equal(c, m.colour.reshape(-1, 3)[occ])
    assert f is None
