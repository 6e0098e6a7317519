"""Matrix-free access to the projection operator and its blocks.

This is the only module that knows matrix entries.  Rows are produced by an
exact-intersection ray tracer (Siddon-style parametric traversal): the entry
for voxel v on ray i is the length of the segment of the source-to-pixel-center
ray inside v, so a row restricted to a cuboid block sums to the chord length of
that ray clipped to the block.

Surfaces
--------
trace_ray
    One ray restricted to a block; returns a sorted sparse row.
SparseRow
    Column indices (local to the block) and intersection lengths.
SubmatrixHandle
    A_I^J for one (row block, column block) pair.  Rows are computed on the
    fly by default; ``cache=True`` keeps them, bit-identical to re-tracing.
forward_project
    Whole-grid forward projection of a volume, view by view.
BlockSystem
    Every column block of A in compressed form, organized per row block, plus
    the streamed (trace-per-task) variant behind the same task interface.
dump_triplets
    Text export of a materialized block, one ``row col value`` line each.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numba import njit

from .errors import BudgetExceededError, ConfigurationError, GeometryError
from .geometry import build_probability_table

logger = logging.getLogger(__name__)

_REL_EPS = 1e-12
_DEFAULT_MATERIALIZE_ENTRIES = 50_000_000
_DEFAULT_CACHE_BUDGET = 1_500_000_000  # bytes of data+index storage


# ---------------------------------------------------------------------------
# tracing kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _trace_ray_kernel(src, dst, origin, vsize, lo, hi, out_idx, out_len):
    """Trace one source-to-pixel segment through the voxels of a block.

    Returns the number of voxels hit, 0 for a miss, -1 for a degenerate ray.
    Indices written to ``out_idx`` are local to the block (row-major within
    its cuboid) and are sorted ascending before returning.
    """
    d0 = dst[0] - src[0]
    d1 = dst[1] - src[1]
    d2 = dst[2] - src[2]
    length = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    if length == 0.0:
        return -1
    scale = abs(d0)
    if abs(d1) > scale:
        scale = abs(d1)
    if abs(d2) > scale:
        scale = abs(d2)
    eps_d = _REL_EPS * scale

    t0 = 0.0
    t1 = 1.0
    for a in range(3):
        if a == 0:
            d = d0
            s = src[0]
        elif a == 1:
            d = d1
            s = src[1]
        else:
            d = d2
            s = src[2]
        blo = origin[a] + lo[a] * vsize[a]
        bhi = origin[a] + hi[a] * vsize[a]
        if abs(d) > eps_d:
            ta = (blo - s) / d
            tb = (bhi - s) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
        else:
            # half-open test so a ray riding exactly on a boundary plane
            # belongs to the upper cell, matching floor-based assignment;
            # a strict test would drop it from both adjacent blocks
            if not (blo <= s < bhi):
                return 0
    if t1 - t0 <= _REL_EPS:
        return 0

    # entry voxel, probed slightly inside the clipped interval
    probe = t0 + 1e-9 * (t1 - t0)
    i0 = int(math.floor((src[0] + probe * d0 - origin[0]) / vsize[0]))
    i1 = int(math.floor((src[1] + probe * d1 - origin[1]) / vsize[1]))
    i2 = int(math.floor((src[2] + probe * d2 - origin[2]) / vsize[2]))
    if i0 < lo[0]:
        i0 = lo[0]
    if i0 > hi[0] - 1:
        i0 = hi[0] - 1
    if i1 < lo[1]:
        i1 = lo[1]
    if i1 > hi[1] - 1:
        i1 = hi[1] - 1
    if i2 < lo[2]:
        i2 = lo[2]
    if i2 > hi[2] - 1:
        i2 = hi[2] - 1

    step0 = 0
    step1 = 0
    step2 = 0
    tmax0 = math.inf
    tmax1 = math.inf
    tmax2 = math.inf
    tdel0 = math.inf
    tdel1 = math.inf
    tdel2 = math.inf
    if abs(d0) > eps_d:
        step0 = 1 if d0 > 0.0 else -1
        plane = i0 + 1 if d0 > 0.0 else i0
        tmax0 = (origin[0] + plane * vsize[0] - src[0]) / d0
        tdel0 = vsize[0] / abs(d0)
    if abs(d1) > eps_d:
        step1 = 1 if d1 > 0.0 else -1
        plane = i1 + 1 if d1 > 0.0 else i1
        tmax1 = (origin[1] + plane * vsize[1] - src[1]) / d1
        tdel1 = vsize[1] / abs(d1)
    if abs(d2) > eps_d:
        step2 = 1 if d2 > 0.0 else -1
        plane = i2 + 1 if d2 > 0.0 else i2
        tmax2 = (origin[2] + plane * vsize[2] - src[2]) / d2
        tdel2 = vsize[2] / abs(d2)

    bny = hi[1] - lo[1]
    bnz = hi[2] - lo[2]
    cnt = 0
    t = t0
    max_steps = (hi[0] - lo[0]) + bny + bnz + 3
    for _ in range(max_steps):
        a = 0
        tm = tmax0
        if tmax1 < tm:
            a = 1
            tm = tmax1
        if tmax2 < tm:
            a = 2
            tm = tmax2
        tn = tm if tm < t1 else t1
        seg = (tn - t) * length
        if seg > 0.0:
            li = ((i0 - lo[0]) * bny + (i1 - lo[1])) * bnz + (i2 - lo[2])
            out_idx[cnt] = li
            out_len[cnt] = seg
            cnt += 1
        if tm >= t1:
            break
        if a == 0:
            i0 += step0
            if i0 < lo[0] or i0 >= hi[0]:
                break
            tmax0 += tdel0
        elif a == 1:
            i1 += step1
            if i1 < lo[1] or i1 >= hi[1]:
                break
            tmax1 += tdel1
        else:
            i2 += step2
            if i2 < lo[2] or i2 >= hi[2]:
                break
            tmax2 += tdel2
        t = tn

    # sort ascending by local index (traversal order is geometric, not lexical)
    for k in range(1, cnt):
        key_i = out_idx[k]
        key_l = out_len[k]
        p = k - 1
        while p >= 0 and out_idx[p] > key_i:
            out_idx[p + 1] = out_idx[p]
            out_len[p + 1] = out_len[p]
            p -= 1
        out_idx[p + 1] = key_i
        out_len[p + 1] = key_l
    return cnt


@njit(cache=True, nogil=True)
def _trace_view_kernel(src, dsts, origin, vsize, lo, hi, cap, out_idx, out_len, counts):
    """Trace every ray of one view (shared source) into capped flat buffers."""
    for rr in range(dsts.shape[0]):
        counts[rr] = _trace_ray_kernel(src, dsts[rr], origin, vsize, lo, hi,
                                       out_idx[rr * cap:(rr + 1) * cap],
                                       out_len[rr * cap:(rr + 1) * cap])


@njit(cache=True, nogil=True)
def _dot_capped(idx, lengths, counts, cap, x, out):
    for rr in range(counts.size):
        acc = 0.0
        base = rr * cap
        for k in range(counts[rr]):
            acc += lengths[base + k] * x[idx[base + k]]
        out[rr] = acc


@njit(cache=True, nogil=True)
def _csr_matvec(data, cols, indptr, x, out):
    for rr in range(indptr.size - 1):
        acc = 0.0
        for p in range(indptr[rr], indptr[rr + 1]):
            acc += data[p] * x[cols[p]]
        out[rr] = acc


@njit(cache=True, nogil=True)
def _csr_rmatvec(data, cols, indptr, r, out):
    for rr in range(indptr.size - 1):
        rv = r[rr]
        for p in range(indptr[rr], indptr[rr + 1]):
            out[cols[p]] += data[p] * rv


@njit(cache=True, nogil=True)
def _csr_matvec_scatter(data, cols, indptr, l2g, x, out):
    """out[l2g[row]] += row . x for every local row."""
    for rr in range(indptr.size - 1):
        acc = 0.0
        for p in range(indptr[rr], indptr[rr + 1]):
            acc += data[p] * x[cols[p]]
        out[l2g[rr]] += acc


@njit(cache=True, nogil=True)
def _commit_kernel(z_j, rbp, sel, z_vals):
    """Swap new block projections into the z store."""
    pos = 0
    for sidx in range(sel.size):
        i = sel[sidx]
        for lr in range(rbp[i], rbp[i + 1]):
            z_j[lr] = z_vals[pos]
            pos += 1


@njit(cache=True, nogil=True)
def _zsum_kernel(z_j, l2g, rbp, ids, out):
    """Accumulate one block's stored projections over the given measurement
    blocks into the full-length buffer ``out``."""
    for k in range(ids.size):
        i = ids[k]
        for lr in range(rbp[i], rbp[i + 1]):
            out[l2g[lr]] += z_j[lr]


def _block_bounds(grid, block):
    if block is None:
        lo = np.zeros(3, dtype=np.int64)
        hi = np.asarray(grid.dims, dtype=np.int64)
    else:
        lo = np.asarray(block.lo, dtype=np.int64)
        hi = np.asarray(block.hi, dtype=np.int64)
    return lo, hi


def _check_source_outside(grid, lo, hi, source):
    o = np.asarray(grid.origin)
    s = np.asarray(grid.voxel_size)
    plo = o + lo * s
    phi = o + hi * s
    if np.all(source > plo) and np.all(source < phi):
        raise GeometryError("source lies strictly inside the block's bounding box")


# ---------------------------------------------------------------------------
# public single-ray surface
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SparseRow:
    """One matrix row restricted to a block: local column indices (strictly
    increasing) and the matching intersection lengths."""

    indices: np.ndarray
    lengths: np.ndarray

    def __len__(self):
        return int(self.indices.size)

    @property
    def total_length(self):
        return float(self.lengths.sum())


def trace_ray(source, pixel_center, grid, block=None):
    """Exact voxel intersection lengths of one source-to-pixel ray.

    Parameters
    ----------
    source, pixel_center : 3-vectors (physical coordinates)
    grid : VolumeGrid
    block : VoxelBlock, optional
        Restrict to this block; the whole grid when omitted.

    Returns
    -------
    SparseRow
        Indices are local to the block (row-major in its cuboid).  The sum of
        lengths equals the chord of the clipped ray through the block box.

    Raises
    ------
    GeometryError
        Degenerate ray (source equals pixel center) or source strictly inside
        the block box.
    """
    src = np.ascontiguousarray(source, dtype=np.float64)
    dst = np.ascontiguousarray(pixel_center, dtype=np.float64)
    if src.shape != (3,) or dst.shape != (3,):
        raise GeometryError("source and pixel_center must be 3-vectors")
    if np.array_equal(src, dst):
        raise GeometryError("degenerate ray: source equals pixel center")
    lo, hi = _block_bounds(grid, block)
    _check_source_outside(grid, lo, hi, src)
    cap = int((hi - lo).sum() + 3)
    out_idx = np.empty(cap, dtype=np.int64)
    out_len = np.empty(cap, dtype=np.float64)
    cnt = _trace_ray_kernel(src, dst,
                            np.asarray(grid.origin), np.asarray(grid.voxel_size),
                            lo, hi, out_idx, out_len)
    if cnt < 0:
        raise GeometryError("degenerate ray: source equals pixel center")
    return SparseRow(out_idx[:cnt].copy(), out_len[:cnt].copy())


def forward_project(geometry, x):
    """Project a full volume: y[i] = sum_v length(i, v) * x[v] for every ray."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    grid = geometry.grid
    if x.size != grid.n_voxels:
        raise ConfigurationError(f"x has {x.size} entries, grid has {grid.n_voxels} voxels")
    lo, hi = _block_bounds(grid, None)
    cap = int((hi - lo).sum() + 3)
    per = geometry.detector.pixels_per_view
    origin = np.asarray(grid.origin)
    vsize = np.asarray(grid.voxel_size)
    y = np.empty(geometry.n_measurements)
    idx = np.empty(per * cap, dtype=np.int64)
    lng = np.empty(per * cap, dtype=np.float64)
    counts = np.empty(per, dtype=np.int64)
    for view in range(geometry.n_views):
        pose = geometry.poses[view]
        _check_source_outside(grid, lo, hi, pose.source)
        dsts = np.ascontiguousarray(geometry.pixel_centers(view))
        _trace_view_kernel(pose.source, dsts, origin, vsize, lo, hi, cap, idx, lng, counts)
        if np.any(counts < 0):
            raise GeometryError(f"degenerate ray in view {view}")
        _dot_capped(idx, lng, counts, cap, x, y[view * per:(view + 1) * per])
    return y


# ---------------------------------------------------------------------------
# block pair handle
# ---------------------------------------------------------------------------

class SubmatrixHandle:
    """A_I^J for one measurement block I and one volume block J.

    ``apply`` and ``apply_transpose`` trace the block's rays on the fly by
    default; with ``cache=True`` the rows are kept after the first use.  The
    cached and freshly traced rows are produced by the same kernel and are
    bit-identical.
    """

    def __init__(self, geometry, row_block, col_block, cache=False):
        self.geometry = geometry
        self.row_block = row_block
        self.col_block = col_block
        self.cache = bool(cache)
        self._csr_arrays = None
        self.n_rows = row_block.size
        self.n_cols = col_block.size

    def _compute_rows(self):
        geo = self.geometry
        rb = self.row_block
        grid = geo.grid
        pose = geo.poses[rb.view]
        lo, hi = _block_bounds(grid, self.col_block)
        _check_source_outside(grid, lo, hi, pose.source)
        per = geo.detector.pixels_per_view
        pixels = rb.measurement_indices - rb.view * per
        dsts = np.ascontiguousarray(geo.pixel_centers(rb.view)[pixels])
        cap = int((hi - lo).sum() + 3)
        idx = np.empty(self.n_rows * cap, dtype=np.int64)
        lng = np.empty(self.n_rows * cap, dtype=np.float64)
        counts = np.empty(self.n_rows, dtype=np.int64)
        _trace_view_kernel(pose.source, dsts, np.asarray(grid.origin),
                           np.asarray(grid.voxel_size), lo, hi, cap, idx, lng, counts)
        if np.any(counts < 0):
            raise GeometryError("degenerate ray in block pair")
        keep = (np.arange(cap)[None, :] < counts[:, None]).ravel()
        indptr = np.zeros(self.n_rows + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return lng[keep], idx[keep].astype(np.int32), indptr

    def _arrays(self):
        if self._csr_arrays is not None:
            return self._csr_arrays
        arrays = self._compute_rows()
        if self.cache:
            self._csr_arrays = arrays
        return arrays

    def apply(self, x_j):
        """y_I = A_I^J x_J; the result spans every pixel of the row block."""
        x_j = np.ascontiguousarray(x_j, dtype=np.float64)
        if x_j.size != self.n_cols:
            raise ConfigurationError(f"x_j has {x_j.size} entries, block has {self.n_cols}")
        data, cols, indptr = self._arrays()
        out = np.empty(self.n_rows)
        _csr_matvec(data, cols, indptr, x_j, out)
        return out

    def apply_transpose(self, r_i):
        """g_J = (A_I^J)^T r_I."""
        r_i = np.ascontiguousarray(r_i, dtype=np.float64)
        if r_i.size != self.n_rows:
            raise ConfigurationError(f"r_i has {r_i.size} entries, block has {self.n_rows}")
        data, cols, indptr = self._arrays()
        out = np.zeros(self.n_cols)
        _csr_rmatvec(data, cols, indptr, r_i, out)
        return out

    def materialize(self, max_entries=_DEFAULT_MATERIALIZE_ENTRIES):
        """Explicit scipy CSR copy of the block, guarded by an entry budget."""
        entries = self.n_rows * self.n_cols
        if entries > max_entries:
            raise BudgetExceededError(
                f"block is {self.n_rows} x {self.n_cols} = {entries} entries, "
                f"budget is {max_entries}")
        data, cols, indptr = self._arrays()
        return sp.csr_matrix((data.copy(), cols.copy(), indptr.copy()),
                             shape=(self.n_rows, self.n_cols))


def dump_triplets(matrix, path):
    """Write a materialized block as text, one ``row col value`` per line.

    Values are written with repr-level precision so the dump round-trips.
    """
    coo = sp.coo_matrix(matrix)
    with open(path, "w", encoding="ascii") as fh:
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v!r}\n")


# ---------------------------------------------------------------------------
# blocked system
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskArrays:
    """Everything a block-iteration kernel needs for one task.

    ``sel`` indexes ``rbp`` (the per-row-block row ranges); ``l2g`` maps local
    rows to global measurement indices; ``cols`` are local column indices of
    the volume block.
    """

    data: np.ndarray
    cols: np.ndarray
    indptr: np.ndarray
    rbp: np.ndarray
    l2g: np.ndarray
    sel: np.ndarray


def estimate_system_nnz(geometry):
    """Estimate the stored-entry count of the full system matrix by tracing
    a single view against the whole grid."""
    grid = geometry.grid
    lo, hi = _block_bounds(grid, None)
    cap = int((hi - lo).sum() + 3)
    per = geometry.detector.pixels_per_view
    dsts = np.ascontiguousarray(geometry.pixel_centers(0))
    idx = np.empty(per * cap, dtype=np.int64)
    lng = np.empty(per * cap, dtype=np.float64)
    counts = np.empty(per, dtype=np.int64)
    _trace_view_kernel(geometry.poses[0].source, dsts, np.asarray(grid.origin),
                       np.asarray(grid.voxel_size), lo, hi, cap, idx, lng, counts)
    return int(np.maximum(counts, 0).sum()) * geometry.n_views


class BlockSystem:
    """Blocked view of the projection operator for one (geometry, partition).

    Two storage modes sit behind one task interface:

    - ``cached``: every column block's rows are traced once and kept as CSR
      arrays organized per row block, so a task is pure arithmetic.
    - ``streamed``: nothing is kept; each task traces the rows it needs.

    Both produce rows from the same kernel, so task results agree bitwise.
    """

    def __init__(self, geometry, partition, table, mode):
        self.geometry = geometry
        self.partition = partition
        self.table = table
        self.mode = mode
        self.n_measurements = geometry.n_measurements
        self.n_voxels = geometry.grid.n_voxels
        self.row_sizes = np.array([b.size for b in partition.row_blocks], dtype=np.int64)
        self.col_sizes = np.array([b.size for b in partition.col_blocks], dtype=np.int64)
        self._row_meas = [b.measurement_indices for b in partition.row_blocks]
        self._vidx = [b.voxel_indices for b in partition.col_blocks]
        # cached-mode storage, one entry per column block
        self._data = None
        self._cols = None
        self._indptr = None
        self._rbp = None
        self._l2g = None
        self.nnz = None

    # -- construction -----------------------------------------------------

    @classmethod
    def build(cls, geometry, partition, table=None, cache="auto", budget_bytes=None):
        """Assemble the blocked system.

        ``cache`` is ``"always"``, ``"never"``, or ``"auto"`` (cache when the
        estimated storage fits ``budget_bytes``, default 1.5e9).
        """
        if cache not in ("auto", "always", "never"):
            raise ConfigurationError(f"cache must be auto, always, or never, got {cache!r}")
        if table is None:
            table = build_probability_table(geometry, partition)
        budget = _DEFAULT_CACHE_BUDGET if budget_bytes is None else int(budget_bytes)
        mode = "streamed"
        if cache == "always":
            mode = "cached"
        elif cache == "auto":
            est = estimate_system_nnz(geometry) * 12  # 8B value + 4B column
            mode = "cached" if est <= budget else "streamed"
        system = cls(geometry, partition, table, mode)
        if mode == "cached":
            system._assemble(budget if cache == "always" else None)
        return system

    def _assemble(self, hard_budget):
        geo = self.geometry
        grid = geo.grid
        origin = np.asarray(grid.origin)
        vsize = np.asarray(grid.voxel_size)
        per = geo.detector.pixels_per_view
        m = self.partition.n_row_blocks
        centers = {}
        self._data, self._cols, self._indptr, self._rbp, self._l2g = [], [], [], [], []
        nnz_total = 0
        for j, vb in enumerate(self.partition.col_blocks):
            lo, hi = _block_bounds(grid, vb)
            cap = int((hi - lo).sum() + 3)
            data_parts, col_parts, cnt_parts, l2g_parts = [], [], [], []
            rbp = np.zeros(m + 1, dtype=np.int64)
            for i, rb in enumerate(self.partition.row_blocks):
                pose = geo.poses[rb.view]
                _check_source_outside(grid, lo, hi, pose.source)
                if rb.view not in centers:
                    centers[rb.view] = np.ascontiguousarray(geo.pixel_centers(rb.view))
                pixels = rb.measurement_indices - rb.view * per
                dsts = np.ascontiguousarray(centers[rb.view][pixels])
                nrays = dsts.shape[0]
                idx = np.empty(nrays * cap, dtype=np.int64)
                lng = np.empty(nrays * cap, dtype=np.float64)
                counts = np.empty(nrays, dtype=np.int64)
                _trace_view_kernel(pose.source, dsts, origin, vsize, lo, hi,
                                   cap, idx, lng, counts)
                if np.any(counts < 0):
                    raise GeometryError(f"degenerate ray in row block {i}")
                hit = counts > 0
                if not np.any(hit):
                    rbp[i + 1] = rbp[i]
                    continue
                keep = (np.arange(cap)[None, :] < counts[:, None]).ravel()
                data_parts.append(lng[keep])
                col_parts.append(idx[keep].astype(np.int32))
                cnt_parts.append(counts[hit])
                l2g_parts.append(rb.measurement_indices[hit])
                rbp[i + 1] = rbp[i] + int(hit.sum())
            if data_parts:
                data = np.concatenate(data_parts)
                cols = np.concatenate(col_parts)
                cnts = np.concatenate(cnt_parts)
                l2g = np.concatenate(l2g_parts)
            else:
                data = np.empty(0)
                cols = np.empty(0, dtype=np.int32)
                cnts = np.empty(0, dtype=np.int64)
                l2g = np.empty(0, dtype=np.int64)
            indptr = np.zeros(cnts.size + 1, dtype=np.int64)
            np.cumsum(cnts, out=indptr[1:])
            nnz_total += data.size
            if hard_budget is not None and nnz_total * 12 > hard_budget:
                raise BudgetExceededError(
                    f"system cache exceeds budget: {nnz_total * 12} bytes so far, "
                    f"budget {hard_budget}")
            self._data.append(data)
            self._cols.append(cols)
            self._indptr.append(indptr)
            self._rbp.append(rbp)
            self._l2g.append(l2g)
        self.nnz = nnz_total
        logger.info("cached blocked system: %d stored entries", nnz_total)

    # -- task interface ----------------------------------------------------

    def voxel_indices(self, j):
        return self._vidx[j]

    def n_local_rows(self, j):
        if self.mode != "cached":
            raise ConfigurationError("streamed systems have no fixed row structure")
        return int(self._l2g[j].size)

    def task_arrays(self, j, i_ids):
        """Arrays for one task on column block j over the row blocks i_ids."""
        if self.mode == "cached":
            return TaskArrays(self._data[j], self._cols[j], self._indptr[j],
                              self._rbp[j], self._l2g[j],
                              np.ascontiguousarray(i_ids, dtype=np.int64))
        return self._trace_task(j, i_ids)

    def _trace_task(self, j, i_ids):
        geo = self.geometry
        grid = geo.grid
        vb = self.partition.col_blocks[j]
        lo, hi = _block_bounds(grid, vb)
        cap = int((hi - lo).sum() + 3)
        per = geo.detector.pixels_per_view
        origin = np.asarray(grid.origin)
        vsize = np.asarray(grid.voxel_size)
        data_parts, col_parts, cnt_parts, l2g_parts = [], [], [], []
        rbp = np.zeros(len(i_ids) + 1, dtype=np.int64)
        for k, i in enumerate(i_ids):
            rb = self.partition.row_blocks[i]
            pose = geo.poses[rb.view]
            _check_source_outside(grid, lo, hi, pose.source)
            pixels = rb.measurement_indices - rb.view * per
            dsts = np.ascontiguousarray(geo.pixel_centers(rb.view)[pixels])
            nrays = dsts.shape[0]
            idx = np.empty(nrays * cap, dtype=np.int64)
            lng = np.empty(nrays * cap, dtype=np.float64)
            counts = np.empty(nrays, dtype=np.int64)
            _trace_view_kernel(pose.source, dsts, origin, vsize, lo, hi,
                               cap, idx, lng, counts)
            if np.any(counts < 0):
                raise GeometryError(f"degenerate ray in row block {i}")
            hit = counts > 0
            keep = (np.arange(cap)[None, :] < counts[:, None]).ravel()
            data_parts.append(lng[keep])
            col_parts.append(idx[keep].astype(np.int32))
            cnt_parts.append(counts[hit])
            l2g_parts.append(rb.measurement_indices[hit])
            rbp[k + 1] = rbp[k] + int(hit.sum())
        data = np.concatenate(data_parts) if data_parts else np.empty(0)
        cols = (np.concatenate(col_parts) if col_parts
                else np.empty(0, dtype=np.int32))
        cnts = (np.concatenate(cnt_parts) if cnt_parts
                else np.empty(0, dtype=np.int64))
        l2g = (np.concatenate(l2g_parts) if l2g_parts
               else np.empty(0, dtype=np.int64))
        indptr = np.zeros(cnts.size + 1, dtype=np.int64)
        np.cumsum(cnts, out=indptr[1:])
        return TaskArrays(data, cols, indptr, rbp, l2g,
                          np.arange(len(i_ids), dtype=np.int64))

    # -- whole-operator helpers ---------------------------------------------

    def forward(self, x):
        """A x over all measurements (block-wise for cached systems)."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        if self.mode != "cached":
            return forward_project(self.geometry, x)
        out = np.zeros(self.n_measurements)
        for j in range(self.partition.n_col_blocks):
            x_j = x[self._vidx[j]]
            _csr_matvec_scatter(self._data[j], self._cols[j],
                                self._indptr[j], self._l2g[j], x_j, out)
        return out

    def measurement_rows(self, i_ids):
        """Global measurement indices covered by the given row blocks."""
        if len(i_ids) == 0:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([self._row_meas[i] for i in i_ids])

    # -- per-block projection store -----------------------------------------

    def new_z_store(self):
        """Fresh per-(block pair) projection values z, all zero.

        Cached systems store one flat array per volume block aligned with its
        local row layout; streamed systems store (rows, values) per visited
        measurement block.
        """
        if self.mode == "cached":
            return [np.zeros(self._l2g[j].size) for j in range(self.partition.n_col_blocks)]
        return [{} for _ in range(self.partition.n_col_blocks)]

    def commit_task(self, z_store, j, i_ids, arrs, sel, z_vals):
        """Write one task's z values into the store.

        ``sel`` selects the task's row blocks within ``arrs`` and ``z_vals``
        holds their new projections consecutively in ``sel`` order.
        """
        if self.mode == "cached":
            _commit_kernel(z_store[j], arrs.rbp, sel, z_vals)
            return
        store = z_store[j]
        pos = 0
        for idx in range(len(sel)):
            p = sel[idx]
            a, b = int(arrs.rbp[p]), int(arrs.rbp[p + 1])
            rows = arrs.l2g[a:b]
            vals = z_vals[pos:pos + (b - a)].copy()
            pos += b - a
            store[int(i_ids[idx])] = (rows, vals)

    def accumulate_z_rows(self, z_store, i_ids, out):
        """Add every volume block's stored projection over the given
        measurement blocks into ``out`` (full measurement length)."""
        if self.mode == "cached":
            ids = np.ascontiguousarray(i_ids, dtype=np.int64)
            for j in range(self.partition.n_col_blocks):
                _zsum_kernel(z_store[j], self._l2g[j], self._rbp[j], ids, out)
            return
        for store in z_store:
            for i in i_ids:
                seg = store.get(int(i))
                if seg is not None:
                    out[seg[0]] += seg[1]

    def fill_z_from_image(self, z_store, x):
        """Set every stored block projection to A_I^J x_J (warm starts)."""
        if self.mode != "cached":
            raise ConfigurationError("warm start requires a cached system")
        x = np.ascontiguousarray(x, dtype=np.float64)
        for j in range(self.partition.n_col_blocks):
            x_j = np.ascontiguousarray(x[self._vidx[j]])
            out = np.empty(self._l2g[j].size)
            _csr_matvec(self._data[j], self._cols[j], self._indptr[j], x_j, out)
            z_store[j][:] = out

    def projection_sum(self, z_store):
        """Recompute sum_j z^j over all measurements from the stored values."""
        out = np.zeros(self.n_measurements)
        if self.mode == "cached":
            for j in range(self.partition.n_col_blocks):
                np.add.at(out, self._l2g[j], z_store[j])
            return out
        for store in z_store:
            for rows, vals in store.values():
                np.add.at(out, rows, vals)
        return out

    def to_scipy(self):
        """Assemble the full operator as one scipy CSR (small problems)."""
        if self.mode != "cached":
            raise ConfigurationError("assemble requires a cached system")
        rows, cols, vals = [], [], []
        for j in range(self.partition.n_col_blocks):
            indptr = self._indptr[j]
            counts = np.diff(indptr)
            rows.append(np.repeat(self._l2g[j], counts))
            cols.append(self._vidx[j][self._cols[j]])
            vals.append(self._data[j])
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_measurements, self.n_voxels))
        return mat.tocsr()
