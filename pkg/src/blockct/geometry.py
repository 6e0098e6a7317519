"""Scan geometry: grids, trajectories, block partitions, and overlap weights.

Everything lives in a right-handed physical coordinate system.  Fan-beam (2D)
setups are stored as one-voxel-thick 3D volumes with a single-row detector so
cone-beam and fan-beam share one code path; rays of a circular fan-beam then
lie in the z = 0 plane and chord lengths are unaffected by the padding.

Public pieces
-------------
VolumeGrid, DetectorModel, ViewPose, ScanGeometry
    Immutable descriptions of the voxel grid, the detector, and the per-view
    source and detector poses.
make_circular_trajectory, make_random_sphere_trajectory
    Trajectory generators returning lists of poses.
VoxelBlock, DetectorBlock, Partition, partition_volume, partition_detector
    Disjoint cuboid / per-view detector-rectangle decompositions.
projection_overlap, build_probability_table, ProbabilityTable
    Perspective silhouette areas clipped to detector rectangles; these areas
    drive both block selection and the per-iteration relaxation scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, GeometryError
from .validation import check_count, check_positive

logger = logging.getLogger(__name__)

_AXIS_TOL = 1e-9


# ---------------------------------------------------------------------------
# grids and detectors
# ---------------------------------------------------------------------------

class VolumeGrid:
    """Regular voxel grid.

    Parameters
    ----------
    dims : sequence of 2 or 3 ints
        Voxel counts per axis.  Two entries describe a fan-beam slice and are
        padded to (nx, ny, 1).
    voxel_size : sequence of floats
        Edge lengths per axis, same length as ``dims``.  The padded z size of
        a 2D grid equals the x size.
    origin : sequence of floats, optional
        Physical coordinate of the low corner of the grid.  Defaults to
        centering the grid on the coordinate origin.

    Attributes
    ----------
    dims : tuple of 3 ints
    voxel_size : tuple of 3 floats
    origin : tuple of 3 floats
    input_ndim : int
        2 or 3, the dimensionality the caller asked for.
    """

    def __init__(self, dims, voxel_size, origin=None):
        dims = tuple(int(d) for d in np.atleast_1d(dims))
        sizes = tuple(float(s) for s in np.atleast_1d(voxel_size))
        if len(dims) not in (2, 3):
            raise ConfigurationError(f"grid dims must have 2 or 3 entries, got {dims}")
        if len(sizes) != len(dims):
            raise ConfigurationError("voxel_size must match dims in length")
        if any(d < 1 for d in dims):
            raise ConfigurationError(f"grid dims must be positive, got {dims}")
        if any(not (s > 0 and math.isfinite(s)) for s in sizes):
            raise ConfigurationError(f"voxel sizes must be positive, got {sizes}")
        self.input_ndim = len(dims)
        if len(dims) == 2:
            dims = dims + (1,)
            sizes = sizes + (sizes[0],)
            if origin is not None:
                origin = tuple(float(o) for o in np.atleast_1d(origin))
                if len(origin) != 2:
                    raise ConfigurationError("origin must match dims in length")
                origin = origin + (-0.5 * sizes[2],)
        if origin is None:
            origin = tuple(-0.5 * d * s for d, s in zip(dims, sizes))
        else:
            origin = tuple(float(o) for o in np.atleast_1d(origin))
            if len(origin) != 3:
                raise ConfigurationError("origin must match dims in length")
        self.dims = dims
        self.voxel_size = sizes
        self.origin = origin

    @property
    def n_voxels(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def upper(self):
        """Physical coordinate of the high corner."""
        return tuple(o + d * s for o, d, s in zip(self.origin, self.dims, self.voxel_size))

    def voxel_centers_axis(self, axis):
        o, s = self.origin[axis], self.voxel_size[axis]
        return o + s * (np.arange(self.dims[axis]) + 0.5)

    def __repr__(self):
        return f"VolumeGrid(dims={self.dims}, voxel_size={self.voxel_size}, origin={self.origin})"


class DetectorModel:
    """Flat detector: pixel counts and spacings along the u and v axes.

    A single entry describes a one-row detector and is padded to (nu, 1) with
    the v spacing equal to the u spacing.  Pixel (iu, iv) of a view has flat
    index ``iv * nu + iu`` and the global measurement index of that pixel is
    ``view * pixels_per_view + flat``.
    """

    def __init__(self, pixel_counts, pixel_spacing):
        counts = tuple(int(c) for c in np.atleast_1d(pixel_counts))
        spacing = tuple(float(s) for s in np.atleast_1d(pixel_spacing))
        if len(counts) not in (1, 2):
            raise ConfigurationError(f"detector pixel counts must have 1 or 2 entries, got {counts}")
        if len(spacing) != len(counts):
            raise ConfigurationError("pixel_spacing must match pixel_counts in length")
        if any(c < 1 for c in counts):
            raise ConfigurationError(f"pixel counts must be positive, got {counts}")
        if any(not (s > 0 and math.isfinite(s)) for s in spacing):
            raise ConfigurationError(f"pixel spacings must be positive, got {spacing}")
        self.input_ndim = len(counts)
        if len(counts) == 1:
            counts = counts + (1,)
            spacing = spacing + (spacing[0],)
        self.pixel_counts = counts
        self.pixel_spacing = spacing

    @property
    def pixels_per_view(self):
        return self.pixel_counts[0] * self.pixel_counts[1]

    def pixel_offsets(self):
        """(P, 2) array of (u, v) center offsets from the detector center."""
        nu, nv = self.pixel_counts
        du, dv = self.pixel_spacing
        iu = np.arange(nu)
        iv = np.arange(nv)
        u = (iu - (nu - 1) / 2.0) * du
        v = (iv - (nv - 1) / 2.0) * dv
        uu, vv = np.meshgrid(u, v)            # rows iv, cols iu: flat = iv*nu + iu
        return np.column_stack([uu.ravel(), vv.ravel()])

    def rect_bounds(self, u0, u1, v0, v1):
        """Physical (u, v) bounds of the pixel rectangle [u0, u1) x [v0, v1)."""
        nu, nv = self.pixel_counts
        du, dv = self.pixel_spacing
        return (
            (u0 - nu / 2.0) * du,
            (u1 - nu / 2.0) * du,
            (v0 - nv / 2.0) * dv,
            (v1 - nv / 2.0) * dv,
        )

    def __repr__(self):
        return f"DetectorModel(pixel_counts={self.pixel_counts}, pixel_spacing={self.pixel_spacing})"


@dataclass(frozen=True)
class ViewPose:
    """Source position and detector frame for one view.

    ``det_u`` and ``det_v`` are orthonormal in-plane detector axes; the
    detector plane passes through ``detector_center`` and is perpendicular to
    the source-to-center line (checked to 1e-9 on unit vectors).
    ``params`` records the trajectory parameters that generated the pose.
    """

    source: np.ndarray
    detector_center: np.ndarray
    det_u: np.ndarray
    det_v: np.ndarray
    params: tuple = ()

    def __post_init__(self):
        for name in ("source", "detector_center", "det_u", "det_v"):
            vec = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if vec.shape != (3,):
                raise GeometryError(f"{name} must be a 3-vector")
            object.__setattr__(self, name, vec)
        axis = self.detector_center - self.source
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            raise GeometryError("source coincides with detector center")
        w = axis / norm
        for name in ("det_u", "det_v"):
            u = getattr(self, name)
            if abs(np.linalg.norm(u) - 1.0) > _AXIS_TOL:
                raise GeometryError(f"{name} must be a unit vector")
            if abs(float(np.dot(w, u))) > _AXIS_TOL:
                raise GeometryError(f"{name} is not perpendicular to the source-center line")
        if abs(float(np.dot(self.det_u, self.det_v))) > _AXIS_TOL:
            raise GeometryError("detector axes are not orthogonal")

    @property
    def normal(self):
        """Unit vector from source toward detector center."""
        axis = self.detector_center - self.source
        return axis / np.linalg.norm(axis)


@dataclass(frozen=True)
class ScanGeometry:
    """A voxel grid, a detector model, and one pose per view."""

    grid: VolumeGrid
    detector: DetectorModel
    poses: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if not self.poses:
            raise ConfigurationError("a scan needs at least one view")

    @property
    def n_views(self):
        return len(self.poses)

    @property
    def n_measurements(self):
        return self.n_views * self.detector.pixels_per_view

    def pixel_centers(self, view):
        """(P, 3) physical centers of all pixels of one view, in flat order."""
        pose = self.poses[view]
        off = self.detector.pixel_offsets()
        return (pose.detector_center
                + off[:, :1] * pose.det_u[None, :]
                + off[:, 1:] * pose.det_v[None, :])

    def measurement_view(self, meas_indices):
        """Split global measurement indices into (view, pixel) pairs."""
        per = self.detector.pixels_per_view
        meas = np.asarray(meas_indices)
        return meas // per, meas % per


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def make_circular_trajectory(n_views, radius, rotation_center=(0.0, 0.0, 0.0),
                             angular_start=0.0):
    """Equiangular circular scan in the z = 0 plane.

    The source of view k sits at angle ``angular_start + 2*pi*k/n_views`` on a
    circle of ``radius`` about ``rotation_center``; the detector center sits
    diametrically opposite at the same radius.  ``det_u`` is the in-plane
    tangent and ``det_v`` is +z.

    Returns
    -------
    list of ViewPose
    """
    n_views = check_count("n_views", n_views)
    radius = check_positive("radius", radius)
    center = np.ascontiguousarray(rotation_center, dtype=np.float64)
    poses = []
    for k in range(n_views):
        theta = angular_start + 2.0 * math.pi * k / n_views
        c, s = math.cos(theta), math.sin(theta)
        src = center + radius * np.array([c, s, 0.0])
        det = center - radius * np.array([c, s, 0.0])
        u = np.array([-s, c, 0.0])
        v = np.array([0.0, 0.0, 1.0])
        poses.append(ViewPose(src, det, u, v, params=(theta,)))
    return poses


def make_random_sphere_trajectory(n_views, radius, source_detector_distance, seed):
    """Randomized sphere scan about the coordinate origin.

    For each view two angles are drawn, ``a`` uniform on [0, pi] and ``b``
    uniform on [0, 2*pi); the source sits at
    ``radius * (sin a cos b, sin a sin b, cos a)`` and the detector center on
    the source-to-origin line at ``source_detector_distance`` from the source.
    The detector plane is perpendicular to that line.

    Returns
    -------
    list of ViewPose
    """
    n_views = check_count("n_views", n_views)
    radius = check_positive("radius", radius)
    dist = check_positive("source_detector_distance", source_detector_distance)
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, math.pi, size=n_views)
    b = rng.uniform(0.0, 2.0 * math.pi, size=n_views)
    poses = []
    for k in range(n_views):
        sa, ca = math.sin(a[k]), math.cos(a[k])
        sb, cb = math.sin(b[k]), math.cos(b[k])
        src = radius * np.array([sa * cb, sa * sb, ca])
        w = -src / radius
        det = src + dist * w
        helper = np.array([0.0, 0.0, 1.0]) if abs(w[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(helper, w)
        u /= np.linalg.norm(u)
        v = np.cross(w, u)
        poses.append(ViewPose(src, det, u, v, params=(a[k], b[k])))
    return poses


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VoxelBlock:
    """Cuboid sub-volume: voxel index bounds [lo, hi) per axis plus the flat
    voxel indices it contains (strictly increasing)."""

    index: int
    lo: tuple
    hi: tuple
    voxel_indices: np.ndarray = field(repr=False)

    @property
    def size(self):
        return int(self.voxel_indices.size)

    @property
    def shape(self):
        return tuple(h - l for l, h in zip(self.lo, self.hi))


@dataclass(frozen=True)
class DetectorBlock:
    """Per-view detector sub-rectangle: pixel bounds [u0, u1) x [v0, v1) of
    one view plus the global measurement indices it covers."""

    index: int
    view: int
    u0: int
    u1: int
    v0: int
    v1: int
    measurement_indices: np.ndarray = field(repr=False)

    @property
    def size(self):
        return int(self.measurement_indices.size)


def _axis_edges(size, splits, what, axis):
    """Block boundaries along one axis: ceil-sized blocks, remainder to the last."""
    if splits > size:
        raise ConfigurationError(
            f"{what} split count {splits} exceeds axis {axis} size {size}")
    base = -(-size // splits)  # ceil
    edges = [min(i * base, size) for i in range(splits)] + [size]
    if any(edges[i] >= edges[i + 1] for i in range(splits)):
        raise ConfigurationError(
            f"{what} splits {splits} leave an empty block on axis {axis} (size {size})")
    return edges


def partition_volume(grid, splits):
    """Split the grid into a cuboid block per cell of a splits grid.

    ``splits`` has one entry per caller axis (2 or 3).  Block sizes along an
    axis are ``ceil(size/splits)`` with the remainder in the last block; a
    split that would leave an empty block is a configuration error.  Blocks
    are ordered with the x split index slowest (C order).

    Returns
    -------
    list of VoxelBlock
    """
    splits = tuple(check_count(f"volume split[{i}]", s) for i, s in enumerate(np.atleast_1d(splits)))
    if len(splits) == grid.input_ndim == 2:
        splits = splits + (1,)
    if len(splits) != 3:
        raise ConfigurationError(f"volume splits must match grid dims, got {splits}")
    edges = [_axis_edges(grid.dims[a], splits[a], "volume", a) for a in range(3)]
    nx, ny, nz = grid.dims
    blocks = []
    idx = 0
    for bx in range(splits[0]):
        for by in range(splits[1]):
            for bz in range(splits[2]):
                lo = (edges[0][bx], edges[1][by], edges[2][bz])
                hi = (edges[0][bx + 1], edges[1][by + 1], edges[2][bz + 1])
                ix = np.arange(lo[0], hi[0])
                iy = np.arange(lo[1], hi[1])
                iz = np.arange(lo[2], hi[2])
                flat = ((ix[:, None, None] * ny + iy[None, :, None]) * nz
                        + iz[None, None, :]).ravel()
                blocks.append(VoxelBlock(idx, lo, hi, flat.astype(np.int64)))
                idx += 1
    return blocks


def partition_detector(detector, n_views, splits):
    """Split every view's detector into sub-rectangles.

    ``splits`` has one entry (u) or two entries (u, v).  Row block ids run
    view-major: ``view * blocks_per_view + (v_split * u_splits + u_split)``.

    Returns
    -------
    list of DetectorBlock
    """
    n_views = check_count("n_views", n_views)
    splits = tuple(check_count(f"detector split[{i}]", s) for i, s in enumerate(np.atleast_1d(splits)))
    if len(splits) == 1:
        splits = splits + (1,)
    if len(splits) != 2:
        raise ConfigurationError(f"detector splits must have 1 or 2 entries, got {splits}")
    nu, nv = detector.pixel_counts
    ue = _axis_edges(nu, splits[0], "detector", 0)
    ve = _axis_edges(nv, splits[1], "detector", 1)
    per_view = detector.pixels_per_view
    blocks = []
    idx = 0
    for view in range(n_views):
        base = view * per_view
        for sv in range(splits[1]):
            for su in range(splits[0]):
                u0, u1 = ue[su], ue[su + 1]
                v0, v1 = ve[sv], ve[sv + 1]
                iv = np.arange(v0, v1)
                iu = np.arange(u0, u1)
                flat = base + (iv[:, None] * nu + iu[None, :]).ravel()
                blocks.append(DetectorBlock(idx, view, u0, u1, v0, v1,
                                            flat.astype(np.int64)))
                idx += 1
    return blocks


@dataclass(frozen=True)
class Partition:
    """Row (measurement) and column (voxel) block decompositions of a scan."""

    row_blocks: tuple
    col_blocks: tuple

    def __post_init__(self):
        object.__setattr__(self, "row_blocks", tuple(self.row_blocks))
        object.__setattr__(self, "col_blocks", tuple(self.col_blocks))

    @property
    def n_row_blocks(self):
        return len(self.row_blocks)

    @property
    def n_col_blocks(self):
        return len(self.col_blocks)

    def validate(self, geometry):
        """Check the blocks exactly tile the measurements and the voxels."""
        rows = np.concatenate([b.measurement_indices for b in self.row_blocks])
        if not np.array_equal(np.sort(rows), np.arange(geometry.n_measurements)):
            raise ConfigurationError("row blocks do not tile the measurement range")
        cols = np.concatenate([b.voxel_indices for b in self.col_blocks])
        if not np.array_equal(np.sort(cols), np.arange(geometry.grid.n_voxels)):
            raise ConfigurationError("column blocks do not tile the voxel range")
        return self


def make_partition(geometry, volume_splits, detector_splits):
    """Build and validate a Partition for a scan geometry."""
    part = Partition(
        partition_detector(geometry.detector, geometry.n_views, detector_splits),
        partition_volume(geometry.grid, volume_splits),
    )
    return part.validate(geometry)


# ---------------------------------------------------------------------------
# projection overlap areas
# ---------------------------------------------------------------------------

def _convex_hull(points):
    """Andrew's monotone chain; returns hull vertices in CCW order."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _clip_halfplane(poly, axis, bound, keep_below):
    """One Sutherland-Hodgman pass against an axis-aligned half plane."""
    if not poly:
        return poly
    out = []
    n = len(poly)
    for k in range(n):
        cur = poly[k]
        nxt = poly[(k + 1) % n]
        if keep_below:
            cur_in = cur[axis] <= bound
            nxt_in = nxt[axis] <= bound
        else:
            cur_in = cur[axis] >= bound
            nxt_in = nxt[axis] >= bound
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            t = (bound - cur[axis]) / (nxt[axis] - cur[axis])
            out.append((cur[0] + t * (nxt[0] - cur[0]),
                        cur[1] + t * (nxt[1] - cur[1])))
    return out


def _clip_rect(poly, ulo, uhi, vlo, vhi):
    poly = _clip_halfplane(poly, 0, ulo, keep_below=False)
    poly = _clip_halfplane(poly, 0, uhi, keep_below=True)
    poly = _clip_halfplane(poly, 1, vlo, keep_below=False)
    poly = _clip_halfplane(poly, 1, vhi, keep_below=True)
    return poly


def _polygon_area(poly):
    """Shoelace area of a simple polygon given as a vertex list."""
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for k in range(n):
        u0, v0 = poly[k]
        u1, v1 = poly[(k + 1) % n]
        area += u0 * v1 - u1 * v0
    return abs(area) / 2.0


def _block_corners(grid, vol_block):
    o = np.asarray(grid.origin)
    s = np.asarray(grid.voxel_size)
    lo = o + np.asarray(vol_block.lo) * s
    hi = o + np.asarray(vol_block.hi) * s
    corners = np.empty((8, 3))
    k = 0
    for cx in (lo[0], hi[0]):
        for cy in (lo[1], hi[1]):
            for cz in (lo[2], hi[2]):
                corners[k] = (cx, cy, cz)
                k += 1
    return corners, lo, hi


def _project_corners(pose, corners):
    """Perspective-project corner points onto the detector plane; returns
    (u, v) coordinates relative to the detector center."""
    src = pose.source
    n = pose.normal
    dplane = float(np.dot(n, pose.detector_center - src))
    rel = corners - src[None, :]
    depth = rel @ n
    eps = _AXIS_TOL * dplane
    if np.all(depth <= eps):
        return None                      # block entirely behind the source
    if np.any(depth <= eps):
        raise GeometryError(
            "volume block straddles the source plane; its projection is undefined")
    t = dplane / depth
    pts = src[None, :] + rel * t[:, None] - pose.detector_center[None, :]
    return np.column_stack([pts @ pose.det_u, pts @ pose.det_v])


def projection_overlap(pose, detector, det_block, grid, vol_block):
    """Area of the block silhouette clipped to a detector sub-rectangle.

    The eight cuboid corners are perspective-projected from the source onto
    the detector plane, their 2D convex hull is clipped against the
    rectangle of ``det_block``, and the remaining polygon area is returned.
    A block entirely behind the source projects nowhere and scores 0.

    Raises
    ------
    GeometryError
        If the source lies inside the block, or the block straddles the
        plane through the source parallel to the detector.
    """
    corners, lo, hi = _block_corners(grid, vol_block)
    if np.all(pose.source > lo) and np.all(pose.source < hi):
        raise GeometryError("source lies inside the volume block; projection undefined")
    uv = _project_corners(pose, corners)
    if uv is None:
        return 0.0
    hull = _convex_hull(uv)
    rect = detector.rect_bounds(det_block.u0, det_block.u1, det_block.v0, det_block.v1)
    return _polygon_area(_clip_rect(hull, *rect))


@dataclass(frozen=True)
class ProbabilityTable:
    """Raw overlap areas P(I, J) and their per-column totals.

    ``values[i, j]`` is the silhouette area of column block j on row block i;
    ``totals[j]`` is the column sum.  The entries are unnormalized weights:
    only ratios matter for selection and relaxation.
    """

    values: np.ndarray
    totals: np.ndarray

    @property
    def active_cols(self):
        """Ids of the column blocks reachable by at least one ray."""
        return np.flatnonzero(self.totals > 0.0)

    def weights_for(self, j):
        return self.values[:, j]


def build_probability_table(geometry, partition):
    """Overlap areas for every (row block, column block) pair.

    Hulls are computed once per (view, column block) and clipped against each
    of the view's sub-rectangles, so the per-view areas are additive across a
    view's detector blocks by construction.

    Column blocks with a zero total are logged as excluded: no ray through
    them reaches any detector block, so no update can touch them.
    """
    m = partition.n_row_blocks
    n = partition.n_col_blocks
    values = np.zeros((m, n))
    detector = geometry.detector
    grid = geometry.grid

    by_view = {}
    for rb in partition.row_blocks:
        by_view.setdefault(rb.view, []).append(rb)

    for j, vb in enumerate(partition.col_blocks):
        corners, lo, hi = _block_corners(grid, vb)
        for view, row_blocks in by_view.items():
            pose = geometry.poses[view]
            if np.all(pose.source > lo) and np.all(pose.source < hi):
                raise GeometryError("source lies inside a volume block; projection undefined")
            uv = _project_corners(pose, corners)
            if uv is None:
                continue
            hull = _convex_hull(uv)
            if len(hull) < 3:
                continue
            for rb in row_blocks:
                rect = detector.rect_bounds(rb.u0, rb.u1, rb.v0, rb.v1)
                values[rb.index, j] = _polygon_area(_clip_rect(hull, *rect))

    totals = values.sum(axis=0)
    for j in np.flatnonzero(totals == 0.0):
        logger.warning("volume block %d has zero total overlap; it is excluded "
                       "from the update schedule", j)
    return ProbabilityTable(values, totals)
