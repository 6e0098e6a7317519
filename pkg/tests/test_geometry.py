"""Grids, detectors, trajectories, partitions, and overlap weights."""

import math

import numpy as np
import pytest

from blockct import (DetectorModel, GeometryError, ConfigurationError,
                     Partition, ProbabilityTable, ScanGeometry, ViewPose,
                     VolumeGrid, build_probability_table,
                     make_circular_trajectory, make_partition,
                     make_random_sphere_trajectory, partition_detector,
                     partition_volume, projection_overlap)

from _oracles import mc_silhouette_area


# ---------------------------------------------------------------------------
# grids and detectors
# ---------------------------------------------------------------------------

def test_grid_2d_padding():
    grid = VolumeGrid((6, 4), (2.0, 3.0))
    assert grid.dims == (6, 4, 1)
    assert grid.voxel_size == (2.0, 3.0, 2.0)   # z thickness equals x size
    assert grid.origin == (-6.0, -6.0, -1.0)    # slab centered on z = 0
    assert grid.input_ndim == 2
    assert grid.n_voxels == 24
    assert grid.upper == (6.0, 6.0, 1.0)


def test_grid_3d_explicit_origin():
    grid = VolumeGrid((2, 3, 4), (1.0, 1.0, 0.5), origin=(1.0, 2.0, 3.0))
    assert grid.origin == (1.0, 2.0, 3.0)
    assert grid.upper == (3.0, 5.0, 5.0)
    np.testing.assert_allclose(grid.voxel_centers_axis(2),
                               3.0 + 0.5 * (np.arange(4) + 0.5))


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        VolumeGrid((4,), (1.0,))
    with pytest.raises(ConfigurationError):
        VolumeGrid((4, 0), (1.0, 1.0))
    with pytest.raises(ConfigurationError):
        VolumeGrid((4, 4), (1.0, -1.0))
    with pytest.raises(ConfigurationError):
        VolumeGrid((4, 4), (1.0,))
    with pytest.raises(ConfigurationError):
        VolumeGrid((4, 4, 4), (1.0, 1.0, 1.0), origin=(0.0, 0.0))


def test_detector_padding_and_flat_order():
    det = DetectorModel(5, 2.0)
    assert det.pixel_counts == (5, 1)
    assert det.pixel_spacing == (2.0, 2.0)
    assert det.pixels_per_view == 5
    off = det.pixel_offsets()
    # 5 pixels, centered: u offsets -4..4 step 2, single v row at 0
    np.testing.assert_allclose(off[:, 0], [-4.0, -2.0, 0.0, 2.0, 4.0])
    np.testing.assert_allclose(off[:, 1], 0.0)

    det2 = DetectorModel((3, 2), (1.0, 4.0))
    off2 = det2.pixel_offsets()
    # flat index iv * nu + iu
    assert off2.shape == (6, 2)
    np.testing.assert_allclose(off2[1], [0.0, -2.0])    # iu=1, iv=0
    np.testing.assert_allclose(off2[3], [-1.0, 2.0])    # iu=0, iv=1


def test_detector_rect_bounds():
    det = DetectorModel(4, 1.5)
    ulo, uhi, vlo, vhi = det.rect_bounds(1, 3, 0, 1)
    assert (ulo, uhi) == ((1 - 2.0) * 1.5, (3 - 2.0) * 1.5)
    assert (vlo, vhi) == (-0.75, 0.75)


def test_detector_validation():
    with pytest.raises(ConfigurationError):
        DetectorModel((4, 4, 4), (1.0, 1.0, 1.0))
    with pytest.raises(ConfigurationError):
        DetectorModel(0, 1.0)
    with pytest.raises(ConfigurationError):
        DetectorModel(4, 0.0)


# ---------------------------------------------------------------------------
# poses and trajectories
# ---------------------------------------------------------------------------

def test_circular_trajectory_layout():
    poses = make_circular_trajectory(4, 10.0)
    assert len(poses) == 4
    np.testing.assert_allclose(poses[0].source, [10.0, 0.0, 0.0])
    np.testing.assert_allclose(poses[0].detector_center, [-10.0, 0.0, 0.0])
    np.testing.assert_allclose(poses[1].source, [0.0, 10.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(poses[2].source, [-10.0, 0.0, 0.0], atol=1e-12)
    for pose in poses:
        assert abs(np.linalg.norm(pose.det_u) - 1.0) < 1e-12
        assert abs(pose.det_u @ pose.normal) < 1e-12
        np.testing.assert_allclose(pose.det_v, [0.0, 0.0, 1.0])


def test_circular_trajectory_start_and_center():
    poses = make_circular_trajectory(2, 5.0, rotation_center=(1.0, 2.0, 0.0),
                                     angular_start=math.pi / 2)
    np.testing.assert_allclose(poses[0].source, [1.0, 7.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(poses[0].detector_center, [1.0, -3.0, 0.0],
                               atol=1e-12)


def test_view_pose_validation():
    src = np.array([10.0, 0.0, 0.0])
    det = np.array([-10.0, 0.0, 0.0])
    with pytest.raises(GeometryError):
        ViewPose(src, det, np.array([0.0, 2.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    with pytest.raises(GeometryError):
        ViewPose(src, det, np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    with pytest.raises(GeometryError):
        ViewPose(src, src, np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    u = np.array([0.0, 1.0, 0.0])
    with pytest.raises(GeometryError):
        ViewPose(src, det, u, u)


def test_random_sphere_trajectory():
    poses = make_random_sphere_trajectory(25, 66.0, 132.0, seed=9)
    again = make_random_sphere_trajectory(25, 66.0, 132.0, seed=9)
    for p, q in zip(poses, again):
        np.testing.assert_array_equal(p.source, q.source)
    for pose in poses:
        assert abs(np.linalg.norm(pose.source) - 66.0) < 1e-9
        assert abs(np.linalg.norm(pose.detector_center - pose.source) - 132.0) < 1e-9
        # detector center on the source-to-origin line, past the origin
        w = -pose.source / 66.0
        np.testing.assert_allclose(pose.detector_center,
                                   pose.source + 132.0 * w, atol=1e-9)
        assert abs(pose.det_u @ pose.det_v) < 1e-9
        assert abs(pose.det_u @ w) < 1e-9


def test_scan_geometry_counts_and_pixel_centers():
    grid = VolumeGrid((4, 4), (1.0, 1.0))
    det = DetectorModel(3, 2.0)
    geo = ScanGeometry(grid, det, make_circular_trajectory(2, 8.0))
    assert geo.n_views == 2
    assert geo.n_measurements == 6
    centers = geo.pixel_centers(0)
    # view 0: detector at (-8,0,0), u = (0,1,0); pixels at v=0 plane
    np.testing.assert_allclose(centers[:, 0], -8.0)
    np.testing.assert_allclose(centers[:, 1], [-2.0, 0.0, 2.0], atol=1e-12)
    views, pix = geo.measurement_view([0, 4])
    np.testing.assert_array_equal(views, [0, 1])
    np.testing.assert_array_equal(pix, [0, 1])
    with pytest.raises(ConfigurationError):
        ScanGeometry(grid, det, ())


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------

def test_partition_detector_ceil_remainder():
    det = DetectorModel(187, 1.0)
    blocks = partition_detector(det, 1, 2)
    assert (blocks[0].u0, blocks[0].u1) == (0, 94)
    assert (blocks[1].u0, blocks[1].u1) == (94, 187)

    blocks16 = partition_detector(det, 1, 16)
    widths = [b.u1 - b.u0 for b in blocks16]
    assert widths == [12] * 15 + [7]


def test_partition_detector_ids_view_major():
    det = DetectorModel((4, 2), (1.0, 1.0))
    blocks = partition_detector(det, 3, (2, 2))
    assert len(blocks) == 12
    # id = view * 4 + (v_split * 2 + u_split)
    b = blocks[7]
    assert b.index == 7 and b.view == 1
    assert (b.u0, b.u1, b.v0, b.v1) == (2, 4, 1, 2)
    base = 1 * 8
    np.testing.assert_array_equal(b.measurement_indices, [base + 6, base + 7])


def test_partition_volume_blocks():
    grid = VolumeGrid((5, 4), (1.0, 1.0))
    blocks = partition_volume(grid, (2, 2))
    assert len(blocks) == 4
    assert blocks[0].shape == (3, 2, 1)
    assert blocks[3].shape == (2, 2, 1)
    # x split index slowest
    assert blocks[1].lo == (0, 2, 0)
    assert blocks[2].lo == (3, 0, 0)
    # flat indices are C order within the grid
    np.testing.assert_array_equal(blocks[3].voxel_indices, [14, 15, 18, 19])


def test_partition_volume_errors():
    grid = VolumeGrid((4, 4), (1.0, 1.0))
    with pytest.raises(ConfigurationError):
        partition_volume(grid, (5, 1))
    with pytest.raises(ConfigurationError):
        partition_volume(grid, (3, 1))    # ceil(4/3)=2 -> edges 0,2,4,4: empty
    with pytest.raises(ConfigurationError):
        partition_volume(grid, (2, 2, 2))  # z axis has size 1


def test_partition_validate_tiling():
    grid = VolumeGrid((4, 4), (1.0, 1.0))
    det = DetectorModel(6, 1.0)
    geo = ScanGeometry(grid, det, make_circular_trajectory(2, 8.0))
    part = make_partition(geo, (2, 2), 2)
    assert part.n_col_blocks == 4 and part.n_row_blocks == 4

    broken = Partition(part.row_blocks[:-1], part.col_blocks)
    with pytest.raises(ConfigurationError):
        broken.validate(geo)


# ---------------------------------------------------------------------------
# projection overlap
# ---------------------------------------------------------------------------

def _small_scan(n_views=6, radius=14.0):
    grid = VolumeGrid((8, 8), (1.0, 1.0))
    det = DetectorModel(12, 1.4)
    return ScanGeometry(grid, det, make_circular_trajectory(n_views, radius))


def test_projection_overlap_matches_ray_cast():
    geo = _small_scan()
    part = make_partition(geo, (2, 2), 2)
    rng_seed = 0
    for view in (0, 1, 4):
        pose = geo.poses[view]
        for det_block in part.row_blocks:
            if det_block.view != view:
                continue
            for vol_block in part.col_blocks:
                area = projection_overlap(pose, geo.detector, det_block,
                                          geo.grid, vol_block)
                lo = np.asarray(geo.grid.origin) + np.asarray(vol_block.lo)
                hi = np.asarray(geo.grid.origin) + np.asarray(vol_block.hi)
                rect = geo.detector.rect_bounds(det_block.u0, det_block.u1,
                                                det_block.v0, det_block.v1)
                est = mc_silhouette_area(pose.source, pose.detector_center,
                                         pose.det_u, pose.det_v, rect,
                                         lo, hi, 4000, seed=rng_seed)
                rng_seed += 1
                rect_area = (rect[1] - rect[0]) * (rect[3] - rect[2])
                # binomial noise bound on the hit fraction, four sigmas
                p = min(max(area / rect_area, 1e-6), 1 - 1e-6)
                tol = 4.0 * rect_area * math.sqrt(p * (1 - p) / 4000)
                assert abs(area - est) <= tol + 1e-9


def test_projection_overlap_additive_over_detector_blocks():
    geo = _small_scan(n_views=5, radius=16.0)
    part2 = make_partition(geo, (2, 2), 2)
    part1 = make_partition(geo, (2, 2), 1)
    for vb in part2.col_blocks:
        for view in range(geo.n_views):
            pose = geo.poses[view]
            whole = [b for b in part1.row_blocks if b.view == view][0]
            pieces = [b for b in part2.row_blocks if b.view == view]
            total = sum(projection_overlap(pose, geo.detector, b, geo.grid, vb)
                        for b in pieces)
            ref = projection_overlap(pose, geo.detector, whole, geo.grid, vb)
            assert abs(total - ref) < 1e-9 * max(ref, 1.0)


def test_projection_overlap_block_behind_source():
    # block sits beyond the source along +x, fully behind the source plane
    grid = VolumeGrid((4, 4), (1.0, 1.0), origin=(20.0, -2.0))
    det = DetectorModel(8, 1.0)
    pose = make_circular_trajectory(1, 10.0)[0]     # source at (10, 0, 0)
    blocks = partition_volume(grid, (1, 1))
    det_blocks = partition_detector(det, 1, 1)
    area = projection_overlap(pose, det, det_blocks[0], grid, blocks[0])
    assert area == 0.0


def test_projection_overlap_source_inside_block():
    grid = VolumeGrid((4, 4), (1.0, 1.0), origin=(8.0, -2.0))
    det = DetectorModel(8, 1.0)
    pose = make_circular_trajectory(1, 10.0)[0]
    blocks = partition_volume(grid, (1, 1))
    det_blocks = partition_detector(det, 1, 1)
    with pytest.raises(GeometryError):
        projection_overlap(pose, det, det_blocks[0], grid, blocks[0])


def test_probability_table_structure():
    geo = _small_scan()
    part = make_partition(geo, (2, 2), 2)
    table = build_probability_table(geo, part)
    assert table.values.shape == (part.n_row_blocks, part.n_col_blocks)
    assert np.all(table.values >= 0.0)
    np.testing.assert_allclose(table.totals, table.values.sum(axis=0))
    np.testing.assert_array_equal(table.active_cols, np.arange(4))
    np.testing.assert_array_equal(table.weights_for(2), table.values[:, 2])
    # entries match the one-pair routine
    rb = part.row_blocks[3]
    vb = part.col_blocks[1]
    one = projection_overlap(geo.poses[rb.view], geo.detector, rb, geo.grid, vb)
    assert abs(table.values[3, 1] - one) < 1e-12 * max(one, 1.0)


def test_probability_table_symmetry():
    # quarter-turn symmetry of a centered scan: rotating the view by 90
    # degrees maps volume quadrant blocks onto each other
    geo = _small_scan(n_views=4, radius=15.0)
    part = make_partition(geo, (2, 2), 1)
    table = build_probability_table(geo, part)
    # blocks: 0=(x-,y-), 1=(x-,y+), 2=(x+,y-), 3=(x+,y+); views step 90 deg
    assert abs(table.values[0, 3] - table.values[1, 2]) < 1e-9
    assert abs(table.values[0, 0] - table.values[1, 1]) < 1e-9


def test_probability_table_excludes_unreachable_blocks():
    values = np.array([[1.0, 0.0, 2.0], [3.0, 0.0, 0.5]])
    table = ProbabilityTable(values, values.sum(axis=0))
    np.testing.assert_array_equal(table.active_cols, [0, 2])
