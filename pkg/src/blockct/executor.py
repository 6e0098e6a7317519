"""Epoch execution: turning a selection plan into committed state updates.

A task is one basic iteration: volume block j against a drawn group of
measurement blocks.  Within one volume-block visit every task reads the same
residual and block-image snapshot, so the visit's tasks are mutually
independent; they are executed by one fused kernel call per contiguous chunk
(optionally across threads, the kernels release the GIL) into per-task
output slots.  Nothing shared is written while tasks are in flight.

All commits happen on the calling thread afterward: per-task block
projections in plan order, and the block-image accumulator via a pairwise
sum over the per-task update matrix.  Both depend only on the plan, never
on the chunking, so the committed state is bitwise identical for any worker
count.

Two modes differ only in where the residual refresh barrier sits:

- ``serial_faithful``: commits and the refresh of the drawn measurement
  blocks happen after each volume-block visit, exactly like the sequential
  algorithm.
- ``parallel``: every visit sees the epoch-start residual; commits and one
  union refresh happen at the epoch barrier.

If a task fails, the batch is abandoned before its commit phase, so a
failed batch leaves no trace in the state.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ExecutorError
from .validation import check_choice, check_count

EXECUTION_MODES = ("serial_faithful", "parallel")


@njit(cache=True, nogil=True)
def _run_tasks(data, cols, indptr, rbp, l2g, sel, gptr, betas, r, x_j,
               x_news, z_all, z_off, mus, statuses, lo, hi):
    """Run tasks lo..hi of one volume-block visit into per-task slots.

    Task k computes g = (A_I^J)^T r_I over its drawn group
    sel[gptr[k]:gptr[k+1]], the relaxed exact-line-search step
    mu = betas[k] * (g.g) / |A_I^J g|^2, the updated block image
    (row k of x_news), and the group's new projections (z_all slice).
    statuses[k]: 0 normal, 1 zero gradient, 2 g in the block null space;
    degenerate tasks keep x_j and mu = 0.
    """
    nj = x_j.size
    for k in range(lo, hi):
        g = np.zeros(nj)
        for si in range(gptr[k], gptr[k + 1]):
            i = sel[si]
            for lr in range(rbp[i], rbp[i + 1]):
                rv = r[l2g[lr]]
                for p in range(indptr[lr], indptr[lr + 1]):
                    g[cols[p]] += data[p] * rv
        gg = 0.0
        for c in range(nj):
            gg += g[c] * g[c]

        xn = x_news[k]
        mu = 0.0
        status = 0
        if gg == 0.0:
            status = 1
            for c in range(nj):
                xn[c] = x_j[c]
        else:
            denom = 0.0
            for si in range(gptr[k], gptr[k + 1]):
                i = sel[si]
                for lr in range(rbp[i], rbp[i + 1]):
                    acc = 0.0
                    for p in range(indptr[lr], indptr[lr + 1]):
                        acc += data[p] * g[cols[p]]
                    denom += acc * acc
            if denom < 1e-30:
                status = 2
                for c in range(nj):
                    xn[c] = x_j[c]
            else:
                mu = betas[k] * gg / denom
                for c in range(nj):
                    xn[c] = x_j[c] + mu * g[c]

        pos = z_off[k]
        for si in range(gptr[k], gptr[k + 1]):
            i = sel[si]
            for lr in range(rbp[i], rbp[i + 1]):
                acc = 0.0
                for p in range(indptr[lr], indptr[lr + 1]):
                    acc += data[p] * xn[cols[p]]
                z_all[pos] = acc
                pos += 1
        mus[k] = mu
        statuses[k] = status


@dataclass
class TaskDescriptor:
    """One basic iteration: volume block ``j`` against the drawn measurement
    blocks ``i_ids``, with the precomputed relaxation ``beta``."""

    index: int
    j: int
    i_ids: np.ndarray
    beta: float


@dataclass
class EpochStats:
    """What one epoch moved: task and visit counts, bytes touched
    (16 bytes per measurement row and per block voxel per task), and the
    number of degenerate (zero-progress) iterations."""

    n_tasks: int = 0
    n_loops: int = 0
    bytes_moved: int = 0
    n_degenerate: int = 0


class _LoopRun:
    """One volume-block visit prepared for execution: packed arrays, group
    boundaries, betas, and the per-task output buffers."""

    def __init__(self, j, groups, system, x_j):
        self.j = j
        self.ids = [np.asarray(ids, dtype=np.int64) for ids, _ in groups]
        self.x_j = x_j
        try:
            self.arrs = system.task_arrays(j, np.concatenate(self.ids))
        except Exception as exc:
            raise ExecutorError(
                f"tasks on volume block {j} failed to assemble: {exc}",
                task=TaskDescriptor(0, j, self.ids[0], groups[0][1])) from exc
        sizes = np.array([ids.size for ids in self.ids], dtype=np.int64)
        self.gptr = np.zeros(sizes.size + 1, dtype=np.int64)
        np.cumsum(sizes, out=self.gptr[1:])
        self.betas = np.array([beta for _, beta in groups], dtype=np.float64)
        self.n_tasks = sizes.size
        arrs = self.arrs
        row_counts = (arrs.rbp[1:] - arrs.rbp[:-1])[arrs.sel]
        task_rows = np.add.reduceat(row_counts, self.gptr[:-1]) \
            if row_counts.size else np.zeros(self.n_tasks, dtype=np.int64)
        self.z_off = np.zeros(self.n_tasks + 1, dtype=np.int64)
        np.cumsum(task_rows, out=self.z_off[1:])
        self.x_news = np.empty((self.n_tasks, x_j.size))
        self.z_all = np.empty(int(self.z_off[-1]))
        self.mus = np.empty(self.n_tasks)
        self.statuses = np.zeros(self.n_tasks, dtype=np.int64)

    def run_range(self, r, lo, hi):
        arrs = self.arrs
        try:
            _run_tasks(arrs.data, arrs.cols, arrs.indptr, arrs.rbp, arrs.l2g,
                       arrs.sel, self.gptr, self.betas, r, self.x_j,
                       self.x_news, self.z_all, self.z_off,
                       self.mus, self.statuses, lo, hi)
        except Exception as exc:
            raise ExecutorError(
                f"tasks {lo}..{hi - 1} on volume block {self.j} failed: {exc}",
                task=TaskDescriptor(lo, self.j, self.ids[lo],
                                    float(self.betas[lo]))) from exc


class EpochExecutor:
    """Runs epochs in ``serial_faithful`` or ``parallel`` mode with
    ``worker_count`` threads; see the module docstring for the contract."""

    def __init__(self, mode="serial_faithful", worker_count=1):
        check_choice("execution_mode", mode, EXECUTION_MODES)
        check_count("worker_count", worker_count, minimum=1)
        self.mode = mode
        self.worker_count = int(worker_count)

    def _execute(self, runs, r):
        """Fill every loop's output buffers; no shared state is written."""
        units = []
        for run in runs:
            bounds = np.linspace(0, run.n_tasks, self.worker_count + 1).astype(int)
            for w in range(self.worker_count):
                if bounds[w] < bounds[w + 1]:
                    units.append((run, int(bounds[w]), int(bounds[w + 1])))
        if self.worker_count == 1 or len(units) <= 1:
            for run, lo, hi in units:
                run.run_range(r, lo, hi)
            return
        with ThreadPoolExecutor(max_workers=self.worker_count) as pool:
            futures = [pool.submit(run.run_range, r, lo, hi)
                       for run, lo, hi in units]
            for f in futures:
                f.result()

    def _commit(self, system, state, runs, stats):
        for run in runs:
            arrs = run.arrs
            for k in range(run.n_tasks):
                sel_slice = arrs.sel[run.gptr[k]:run.gptr[k + 1]]
                system.commit_task(state.z, run.j, run.ids[k],
                                   arrs, sel_slice,
                                   run.z_all[run.z_off[k]:run.z_off[k + 1]])
            state.xhat[system.voxel_indices(run.j)] += run.x_news.sum(axis=0)
            state.counts[run.j] += run.n_tasks
            stats.n_tasks += run.n_tasks
            stats.n_degenerate += int(np.count_nonzero(run.statuses))
            pix = int(system.row_sizes[np.concatenate(run.ids)].sum())
            stats.bytes_moved += 16 * (pix + run.n_tasks * int(system.col_sizes[run.j]))

    @staticmethod
    def _refresh(system, state, i_ids):
        ids = np.unique(np.asarray(i_ids, dtype=np.int64))
        rows = system.measurement_rows(ids)
        if rows.size == 0:
            return
        acc = np.zeros(state.y.size)
        system.accumulate_z_rows(state.z, ids, acc)
        state.r[rows] = state.y[rows] - acc[rows]

    def run_epoch(self, epoch, loops, state, system):
        """Execute one epoch.

        ``loops`` is ``[(j, [(i_ids, beta), ...]), ...]`` in execution order.
        Mutates ``state`` (z, r, xhat, counts); the epoch-end image commit
        is the caller's job.
        """
        stats = EpochStats()
        stats.n_loops = len(loops)
        x_snapshots = {}
        prepared = []
        for j, groups in loops:
            if j not in x_snapshots:
                x_snapshots[j] = np.ascontiguousarray(
                    state.x[system.voxel_indices(j)])
            prepared.append(_LoopRun(j, groups, system, x_snapshots[j]))

        if self.mode == "serial_faithful":
            for run in prepared:
                self._execute([run], state.r)
                self._commit(system, state, [run], stats)
                self._refresh(system, state, np.concatenate(run.ids))
        else:
            self._execute(prepared, state.r)
            self._commit(system, state, prepared, stats)
            if prepared:
                drawn = np.concatenate([i for run in prepared for i in run.ids])
                self._refresh(system, state, drawn)
        return stats
