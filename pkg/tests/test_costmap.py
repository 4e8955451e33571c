"""Cost-map builders against brute-force distance oracles, bilinear sampling
against finite differences."""

import numpy as np
import pytest

from semloc.costmap import (
    CostMap,
    SegMask,
    build_costmap_distance_transform,
    build_costmap_morphology,
    build_costmap_signboard,
    extract_edges,
    load_costmap,
    load_mask,
    sample_bilinear,
    save_costmap,
    save_mask,
)
from semloc.errors import OutOfBounds
from semloc.geometry import (
    CameraModel,
    Pose,
    camera_rotation,
    jacobian_point_se3,
    jacobian_projection,
    project,
    transform_point,
)
from semloc.hdmap import LandmarkClass

LANE = LandmarkClass.LANE_MARKING
BOARD = LandmarkClass.SIGNBOARD


def brute_chessboard(occ):
    """O(N*M) chessboard distance from every pixel to the occupied set."""
    h, w = occ.shape
    gy, gx = np.mgrid[0:h, 0:w]
    dist = np.full((h, w), 10**9, dtype=np.int64)
    for y, x in zip(*np.nonzero(occ)):
        np.minimum(dist, np.maximum(np.abs(gy - y), np.abs(gx - x)), out=dist)
    return dist


def brute_euclidean(occ):
    h, w = occ.shape
    gy, gx = np.mgrid[0:h, 0:w]
    d2 = np.full((h, w), np.inf)
    for y, x in zip(*np.nonzero(occ)):
        np.minimum(d2, (gy - y) ** 2 + (gx - x) ** 2, out=d2)
    return np.sqrt(d2)


def brute_boundary(occ):
    """Occupied pixels with an empty 4-neighbor (off-image counts as empty)."""
    h, w = occ.shape
    out = np.zeros_like(occ, dtype=bool)
    for y, x in zip(*np.nonzero(occ)):
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = y + dy, x + dx
            if ny < 0 or ny >= h or nx < 0 or nx >= w or not occ[ny, nx]:
                out[y, x] = True
    return out


def random_mask(rng, width=64, height=64, density=0.02):
    data = (rng.random((height, width)) < density).astype(np.uint8)
    return SegMask(width, height, LANE, data)


def blob_mask(rng, width=64, height=64):
    """Union of a few random filled discs plus salt pixels."""
    gy, gx = np.mgrid[0:height, 0:width]
    occ = np.zeros((height, width), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(8, height - 8), rng.uniform(8, width - 8)
        r = rng.uniform(3, 9)
        occ |= (gy - cy) ** 2 + (gx - cx) ** 2 <= r * r
    occ |= rng.random((height, width)) < 0.005
    return SegMask(width, height, BOARD, occ.astype(np.uint8))


def test_morphology_empty_mask_is_zero():
    cm = build_costmap_morphology(SegMask.empty(16, 12, LANE))
    assert cm.data.shape == (12, 16)
    assert np.array_equal(cm.data, np.zeros((12, 16)))


def test_morphology_single_pixel_hand_ramp():
    mask = SegMask.empty(9, 9, LANE).data.copy()
    mask[4, 4] = 1
    cm = build_costmap_morphology(SegMask(9, 9, LANE, mask), plateau_dilate=0, ramp_width=2)
    assert cm.data[4, 4] == 1.0
    for y, x in [(3, 3), (3, 4), (3, 5), (4, 3), (4, 5), (5, 3), (5, 4), (5, 5)]:
        assert cm.data[y, x] == 0.5
    assert cm.data[2, 4] == 0.0
    assert cm.data[0, 0] == 0.0


def test_morphology_matches_bruteforce_bitlevel():
    rng = np.random.default_rng(7)
    for _ in range(50):
        mask = random_mask(rng)
        if not mask.data.any():
            continue
        plateau = int(rng.integers(0, 4))
        ramp = int(rng.integers(1, 30))
        cm = build_costmap_morphology(mask, plateau, ramp)
        dist = brute_chessboard(mask.data.astype(bool))
        expected = np.maximum(0.0, 1.0 - np.maximum(dist - plateau, 0) / float(ramp))
        assert np.array_equal(cm.data, expected)


def test_morphology_plateau_support_exact_one():
    rng = np.random.default_rng(8)
    for _ in range(10):
        mask = random_mask(rng, density=0.01)
        if not mask.data.any():
            continue
        cm = build_costmap_morphology(mask, plateau_dilate=2, ramp_width=20)
        dist = brute_chessboard(mask.data.astype(bool))
        assert np.all(cm.data[dist <= 2] == 1.0)
        assert np.all(cm.data[dist > 2] < 1.0)


def test_signboard_empty_mask_is_zero():
    cm = build_costmap_signboard(SegMask.empty(8, 8, BOARD))
    assert np.array_equal(cm.data, np.zeros((8, 8)))


def test_signboard_rectangle_peaks_on_perimeter():
    occ = np.zeros((64, 64), dtype=np.uint8)
    occ[10:54, 10:54] = 1
    cm = build_costmap_signboard(SegMask(64, 64, BOARD, occ), plateau_dilate=2, ramp_width=5)
    # perimeter pixels hold the peak
    assert np.all(cm.data[10, 10:54] == 1.0)
    assert np.all(cm.data[53, 10:54] == 1.0)
    assert np.all(cm.data[10:54, 10] == 1.0)
    assert np.all(cm.data[10:54, 53] == 1.0)
    # deep interior has decayed to zero
    assert cm.data[32, 32] == 0.0


def test_signboard_edges_match_boundary_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        mask = blob_mask(rng)
        occ = mask.data.astype(bool)
        assert np.array_equal(extract_edges(occ), brute_boundary(occ))
        plateau = int(rng.integers(0, 3))
        ramp = int(rng.integers(1, 25))
        cm = build_costmap_signboard(mask, plateau, ramp)
        edges = brute_boundary(occ)
        dist = brute_chessboard(edges)
        expected = np.maximum(0.0, 1.0 - np.maximum(dist - plateau, 0) / float(ramp))
        assert np.array_equal(cm.data, expected)


def test_distance_transform_triangle_values():
    occ = np.zeros((8, 8), dtype=np.uint8)
    occ[0, 0] = 1
    cm = build_costmap_distance_transform(SegMask(8, 8, LANE, occ), truncation=5.0)
    assert cm.data[4, 3] == pytest.approx(0.0, abs=1e-12)  # distance 5 exactly
    assert cm.data[3, 0] == pytest.approx(0.4, abs=1e-12)
    assert cm.data[0, 3] == pytest.approx(0.4, abs=1e-12)


def test_distance_transform_all_occupied_is_one():
    occ = np.ones((6, 7), dtype=np.uint8)
    cm = build_costmap_distance_transform(SegMask(7, 6, LANE, occ), truncation=3.0)
    assert np.array_equal(cm.data, np.ones((6, 7)))


def test_distance_transform_matches_bruteforce():
    rng = np.random.default_rng(10)
    for _ in range(50):
        mask = random_mask(rng)
        if not mask.data.any():
            continue
        trunc = float(rng.uniform(2.0, 40.0))
        cm = build_costmap_distance_transform(mask, trunc)
        expected = np.maximum(0.0, 1.0 - brute_euclidean(mask.data.astype(bool)) / trunc)
        assert np.max(np.abs(cm.data - expected)) < 1e-9


def test_all_builders_bounded_zero_one():
    rng = np.random.default_rng(11)
    for _ in range(10):
        mask = blob_mask(rng)
        for cm in (
            build_costmap_morphology(mask, 2, 20),
            build_costmap_signboard(mask, 2, 20),
            build_costmap_distance_transform(mask, 15.0),
        ):
            assert np.all(cm.data >= 0.0)
            assert np.all(cm.data <= 1.0)


def _costmap_from(data):
    data = np.asarray(data, dtype=float)
    return CostMap(data.shape[1], data.shape[0], LANE, data)


def test_bilinear_constant_map():
    cm = _costmap_from(np.full((5, 7), 0.37))
    for u in [(0.0, 0.0), (3.2, 1.7), (6.0, 4.0), (5.999, 3.999)]:
        value, grad = sample_bilinear(cm, np.array(u))
        assert value == pytest.approx(0.37, abs=1e-12)
        assert np.allclose(grad, 0.0, atol=1e-12)


def test_bilinear_linear_ramp_gradient():
    w, h = 16, 12
    data = np.tile(np.arange(w, dtype=float) / w, (h, 1))
    cm = _costmap_from(data)
    rng = np.random.default_rng(12)
    for _ in range(20):
        u = np.array([rng.uniform(0.5, w - 1.5), rng.uniform(0.5, h - 1.5)])
        value, grad = sample_bilinear(cm, u)
        assert value == pytest.approx(u[0] / w, abs=1e-12)
        assert grad[0] == pytest.approx(1.0 / w, abs=1e-12)
        assert grad[1] == pytest.approx(0.0, abs=1e-12)


def test_bilinear_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    data = rng.random((20, 24))
    cm = _costmap_from(data)
    step = 1e-4
    for _ in range(100):
        # keep the FD stencil inside one bilinear cell
        u = np.array(
            [
                rng.integers(0, 23) + rng.uniform(2 * step, 1 - 2 * step),
                rng.integers(0, 19) + rng.uniform(2 * step, 1 - 2 * step),
            ]
        )
        _, grad = sample_bilinear(cm, u)
        for axis in range(2):
            lo = u.copy()
            hi = u.copy()
            lo[axis] -= step
            hi[axis] += step
            fd = (sample_bilinear(cm, hi)[0] - sample_bilinear(cm, lo)[0]) / (2 * step)
            assert grad[axis] == pytest.approx(fd, abs=1e-6)


def test_bilinear_continuous_at_corners():
    rng = np.random.default_rng(14)
    data = rng.random((6, 8))
    cm = _costmap_from(data)
    eps = 1e-9
    for y in range(1, 5):
        for x in range(1, 7):
            center, _ = sample_bilinear(cm, np.array([float(x), float(y)]))
            assert center == pytest.approx(data[y, x], abs=1e-9)
            for dx, dy in [(-eps, -eps), (eps, -eps), (-eps, eps), (eps, eps)]:
                v, _ = sample_bilinear(cm, np.array([x + dx, y + dy]))
                assert v == pytest.approx(center, abs=1e-7)


def test_bilinear_domain_edges_and_out_of_bounds():
    cm = _costmap_from(np.arange(12, dtype=float).reshape(3, 4))
    value, _ = sample_bilinear(cm, np.array([3.0, 2.0]))
    assert value == pytest.approx(11.0, abs=1e-12)
    for bad in [(-0.01, 1.0), (1.0, -0.01), (3.01, 1.0), (1.0, 2.01)]:
        with pytest.raises(OutOfBounds):
            sample_bilinear(cm, np.array(bad))


def test_mask_io_roundtrip(tmp_path):
    rng = np.random.default_rng(15)
    mask = random_mask(rng, width=33, height=21, density=0.3)
    path = tmp_path / "m.pgm"
    save_mask(mask, path)
    back = load_mask(path, LANE)
    assert back.width == 33 and back.height == 21
    assert np.array_equal(back.data, mask.data)


def test_costmap_io_roundtrip(tmp_path):
    rng = np.random.default_rng(16)
    mask = random_mask(rng, width=40, height=30)
    cm = build_costmap_morphology(mask)
    path = tmp_path / "c.pfm"
    save_costmap(cm, path)
    back = load_costmap(path, LANE)
    assert back.width == 40 and back.height == 30
    assert np.max(np.abs(back.data - cm.data)) < 1e-6


def test_cost_gradient_chains_through_projection():
    """Analytic gradient of the sampled cost wrt a body-pose perturbation
    agrees with central finite differences through the full chain."""
    rng = np.random.default_rng(17)
    front = Pose(camera_rotation(0.0, 0.0), np.array([1.5, 0.0, 1.4]))
    cam = CameraModel(
        fx=320.0, fy=320.0, cx=320.0, cy=240.0, width=640, height=480,
        extrinsic_bc=front, name="front",
    )
    mask = SegMask(640, 480, LANE, (rng.random((480, 640)) < 0.01).astype(np.uint8))
    cm = build_costmap_morphology(mask)
    extrinsic_cb = cam.extrinsic_bc.inverse()
    step = 1e-6
    checked = 0
    for _ in range(2000):
        if checked >= 25:
            break
        pose = Pose.exp(rng.uniform(-0.5, 0.5, size=6))
        p_b = np.array([rng.uniform(6.0, 40.0), rng.uniform(-8.0, 8.0), rng.uniform(-1.0, 2.0)])
        P_w = pose.apply(p_b)
        p_c = transform_point(pose, cam.extrinsic_bc, P_w)
        try:
            uv = project(cam, p_c)
        except Exception:
            continue
        if not (1.0 < uv[0] < cam.width - 2 and 1.0 < uv[1] < cam.height - 2):
            continue
        _, grad_uv = sample_bilinear(cm, uv)
        analytic = grad_uv @ jacobian_projection(cam, p_c) @ jacobian_point_se3(p_c, extrinsic_cb)
        fd = np.zeros(6)
        for k in range(6):
            delta = np.zeros(6)
            delta[k] = step
            hi = pose.compose(Pose.exp(delta))
            lo = pose.compose(Pose.exp(-delta))
            v_hi = sample_bilinear(cm, project(cam, transform_point(hi, cam.extrinsic_bc, P_w)))[0]
            v_lo = sample_bilinear(cm, project(cam, transform_point(lo, cam.extrinsic_bc, P_w)))[0]
            fd[k] = (v_hi - v_lo) / (2 * step)
        scale = max(1.0, np.max(np.abs(fd)))
        assert np.max(np.abs(analytic - fd)) / scale < 1e-4
        checked += 1
    assert checked == 25
