"""Block-iterative solvers.

The main runner sweeps volume blocks per epoch.  Each visited block runs a
loop of basic iterations against randomly drawn measurement blocks: the
block-restricted residual gradient g = (A_I^J)^T r_I, a relaxed
exact-line-search step along it, and fresh block projections
z = A_I^J (x_J + mu g).  Updated block images accumulate in a scratch buffer
and commit as their average at the epoch barrier; the measurement residual
is re-synced to r = y - sum_j z^j, recomputed from the stored block
projections, for the drawn rows after each visit (or at the epoch barrier
in parallel execution).

The relaxation of a draw is beta = b * w(I) / W(J), where w is the drawn
group's raw selection weight (shadow overlap area) and W the block's total;
b is the user-facing knob.  Scaling by the draw weight keeps the expected
per-epoch step size comparable across sampling strategies.

Classic whole-system baselines (cyclic row-action and column-action sweeps)
are included for comparison traces.

Trace conventions: one row per epoch, wall_seconds cumulative since the run
started, obs_gap_db measured against the projection sum recomputed at the
epoch barrier, theta as used for that epoch's draws.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DivergenceError, ScheduleError
from .executor import EXECUTION_MODES, EpochExecutor
from .metrics import ConvergenceTrace, TraceRow, observation_gap_db, snr_db
from .sampling import BlockScheduler, SamplingConfig, ScriptedScheduler
from .validation import as_vector, check_choice, check_count, check_positive

logger = logging.getLogger(__name__)

M_RULES = ("identity", "sum_inverse", "norm_inverse")


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class SolverState:
    """Everything a run mutates.

    x is the committed image, xhat / counts the intra-epoch accumulator,
    z the per-block-pair projections, r the maintained residual
    (y - sum_j z^j at the last refresh of each row), epoch the last
    committed epoch.
    """

    x: np.ndarray
    y: np.ndarray
    r: np.ndarray
    z: list
    xhat: np.ndarray
    counts: np.ndarray
    epoch: int = 0

    @classmethod
    def initialize(cls, system, y, x0=None):
        y = as_vector("y", y, length=system.n_measurements)
        z = system.new_z_store()
        if x0 is None:
            x = np.zeros(system.n_voxels)
            r = y.copy()
        else:
            x = as_vector("x0", x0, length=system.n_voxels).copy()
            if np.any(x != 0.0):
                system.fill_z_from_image(z, x)
            r = y - system.projection_sum(z)
        return cls(x=x, y=y.copy(), r=r, z=z,
                   xhat=np.zeros(system.n_voxels),
                   counts=np.zeros(system.partition.n_col_blocks, dtype=np.int64))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverParams:
    """Knobs of a block-iterative run.

    b is the relaxation budget (per-draw beta = b * weight ratio),
    group_size the number of measurement blocks unioned per basic iteration,
    audit_interval the epoch stride of bookkeeping audits (0 disables), and
    divergence_factor the image-norm growth that aborts the run.
    """

    epochs: int
    b: float = 100.0
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    group_size: int = 1
    execution_mode: str = "serial_faithful"
    worker_count: int = 1
    audit_interval: int = 0
    divergence_factor: float = 1e6
    seed: int | None = None

    def __post_init__(self):
        check_count("epochs", self.epochs, minimum=0)
        check_positive("b", self.b)
        check_count("group_size", self.group_size, minimum=1)
        check_choice("execution_mode", self.execution_mode, EXECUTION_MODES)
        check_count("worker_count", self.worker_count, minimum=1)
        check_count("audit_interval", self.audit_interval, minimum=0)
        check_positive("divergence_factor", self.divergence_factor)


# ---------------------------------------------------------------------------
# reference single step
# ---------------------------------------------------------------------------

def basic_iteration(submatrix, r_i, x_j, beta):
    """One relaxed steepest-descent step on a block pair.

    Reference implementation on a SubmatrixHandle; the epoch runner computes
    the same quantities with a fused kernel on packed arrays.

    Returns (x_j_new, z_i, mu) where z_i = A_I^J x_j_new over the full row
    block.  A zero gradient or a gradient in the block null space yields
    mu = 0 and an unchanged image.
    """
    check_positive("beta", beta)
    x_j = as_vector("x_j", x_j, length=submatrix.n_cols)
    r_i = as_vector("r_i", r_i, length=submatrix.n_rows)
    g = submatrix.apply_transpose(r_i)
    gg = float(g @ g)
    if gg == 0.0:
        return x_j.copy(), submatrix.apply(x_j), 0.0
    t = submatrix.apply(g)
    denom = float(t @ t)
    if denom < 1e-30:
        logger.warning("gradient lies in the block null space; skipping step")
        return x_j.copy(), submatrix.apply(x_j), 0.0
    mu = beta * gg / denom
    x_new = x_j + mu * g
    return x_new, submatrix.apply(x_new), mu


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------

def audit_state(state, system):
    """Bookkeeping audit: recompute sum_j z^j from the stored block
    projections and compare the maintained residual against y minus that
    sum.  Every refresh covers exactly the rows whose projections changed,
    so at epoch boundaries r == y - sum_j z^j holds row for row and any
    difference is a refresh bug.  The reported drift is relative to the
    measurement scale."""
    s_re = system.projection_sum(state.z)
    scale = float(np.abs(state.y).max())
    if scale == 0.0:
        scale = 1.0
    drift = float(np.abs(state.r - (state.y - s_re)).max() / scale)
    return {"epoch": state.epoch, "r_drift": drift}


# ---------------------------------------------------------------------------
# epoch runner
# ---------------------------------------------------------------------------

def _group_beta(table, b, j, ids):
    total = float(table.totals[j])
    if total <= 0.0:
        raise ScheduleError(f"volume block {j} has no selectable measurement blocks")
    return b * float(table.values[ids, j].sum()) / total


def _commit_epoch(state, system):
    for j in np.flatnonzero(state.counts):
        vidx = system.voxel_indices(j)
        state.x[vidx] = state.xhat[vidx] / state.counts[j]
        state.xhat[vidx] = 0.0
    state.counts[:] = 0


def run_gcsgd(system, y, params, x_true=None, x0=None, callback=None,
              schedule=None, plan_record=None):
    """Run the grouped solver for ``params.epochs`` epochs.

    Parameters
    ----------
    system : BlockSystem
    y : measurements, length system.n_measurements
    params : SolverParams
    x_true : optional reference volume for the trace's snr_db column
    x0 : optional warm-start image
    callback : optional ``callback(epoch, state, row)`` after each commit
    schedule : optional scripted selection entries (replaces sampling)
    plan_record : optional dict collecting each epoch's realized plan

    Returns
    -------
    (x, trace) : the final image and the per-epoch ConvergenceTrace.

    Raises
    ------
    DivergenceError
        When the image norm is non-finite or exceeds divergence_factor
        times its first-epoch value; carries last_good_epoch and the trace.
    """
    if schedule is not None:
        scheduler = ScriptedScheduler(schedule, group_size=params.group_size)
    else:
        scheduler = BlockScheduler(system.table, params.sampling,
                                   group_size=params.group_size)
    state = SolverState.initialize(system, y, x0=x0)
    executor = EpochExecutor(params.execution_mode, params.worker_count)
    rng = np.random.default_rng(params.seed)
    trace = ConvergenceTrace()
    y_scale = float(np.linalg.norm(state.y))
    ref_norm = None
    started = time.perf_counter()

    for epoch in range(1, params.epochs + 1):
        theta_now = scheduler.theta
        plan = scheduler.epoch_plan(epoch, rng)
        if plan_record is not None:
            plan_record[epoch] = plan
        loops = [(j, [(ids, _group_beta(system.table, params.b, j, ids))
                      for ids in groups])
                 for j, groups in plan]
        stats = executor.run_epoch(epoch, loops, state, system)
        _commit_epoch(state, system)
        scheduler.advance_epoch()
        state.epoch = epoch

        snr = snr_db(x_true, state.x) if x_true is not None else math.nan
        if y_scale > 0.0:
            gap = observation_gap_db(state.y, system.projection_sum(state.z))
        else:
            gap = math.nan
        row = TraceRow(epoch=epoch,
                       effective_epoch=epoch * params.sampling.alpha,
                       snr_db=snr, obs_gap_db=gap,
                       wall_seconds=time.perf_counter() - started,
                       mode=params.execution_mode, theta=theta_now,
                       bytes_moved=stats.bytes_moved, n_tasks=stats.n_tasks)
        trace.append(row)

        norm_x = float(np.linalg.norm(state.x))
        if ref_norm is None:
            ref_norm = max(norm_x, 1e-12)
        if not math.isfinite(norm_x) or norm_x > params.divergence_factor * ref_norm:
            raise DivergenceError(
                f"image norm {norm_x:.3e} left the stable region at epoch {epoch}",
                last_good_epoch=epoch - 1, trace=trace)

        if params.audit_interval and epoch % params.audit_interval == 0:
            rec = audit_state(state, system)
            trace.audits.append(rec)
            if rec["r_drift"] > 1e-8:
                logger.warning("residual bookkeeping drift %.3e at epoch %d",
                               rec["r_drift"], epoch)
        if callback is not None:
            callback(epoch, state, row)

    return state.x.copy(), trace


def run_csgd(system, y, params, **kwargs):
    """Ungrouped runner: one measurement block per basic iteration.

    Identical to run_gcsgd with group_size 1, which it requires.
    """
    if params.group_size != 1:
        raise ConfigurationError("run_csgd requires group_size 1")
    return run_gcsgd(system, y, params, **kwargs)


# ---------------------------------------------------------------------------
# whole-system baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineParams:
    """Cyclic baseline knobs: relaxation omega and the diagonal scaling
    rule (identity, sum_inverse, or norm_inverse)."""

    epochs: int
    omega: float = 1.0
    m_rule: str = "norm_inverse"

    def __post_init__(self):
        check_count("epochs", self.epochs, minimum=0)
        check_positive("omega", self.omega)
        check_choice("m_rule", self.m_rule, M_RULES)


def _safe_inverse(v):
    v = np.asarray(v, dtype=np.float64).ravel()
    out = np.zeros_like(v)
    nz = v > 0.0
    out[nz] = 1.0 / v[nz]
    return out


def _baseline_trace_row(epoch, x, y, y_est, x_true, started):
    snr = snr_db(x_true, x) if x_true is not None else math.nan
    gap = observation_gap_db(y, y_est) if np.linalg.norm(y) > 0 else math.nan
    return TraceRow(epoch=epoch, effective_epoch=float(epoch), snr_db=snr,
                    obs_gap_db=gap, wall_seconds=time.perf_counter() - started,
                    mode="", theta=math.nan)


def run_row_action(system, y, params, x_true=None):
    """Cyclic row-action sweeps: per measurement block I,
    x += omega * A_I^T M (y_I - A_I x) with M from the scaling rule.

    Returns (x, trace); effective_epoch counts full data passes.
    """
    y = as_vector("y", y, length=system.n_measurements)
    A = system.to_scipy()
    blocks = []
    for rb in system.partition.row_blocks:
        A_i = A[rb.measurement_indices]
        if params.m_rule == "identity":
            m_diag = np.ones(A_i.shape[0])
        elif params.m_rule == "sum_inverse":
            m_diag = _safe_inverse(np.asarray(A_i.sum(axis=1)))
        else:
            m_diag = _safe_inverse(np.asarray(A_i.multiply(A_i).sum(axis=1)))
        blocks.append((A_i, rb.measurement_indices, m_diag))
    x = np.zeros(system.n_voxels)
    trace = ConvergenceTrace()
    started = time.perf_counter()
    for epoch in range(1, params.epochs + 1):
        for A_i, meas, m_diag in blocks:
            res = y[meas] - A_i @ x
            x += params.omega * (A_i.T @ (m_diag * res))
        row = _baseline_trace_row(epoch, x, y, A @ x, x_true, started)
        row.mode = "row_action"
        trace.append(row)
    return x, trace


def run_column_action(system, y, params, x_true=None):
    """Cyclic column-action sweeps: per volume block J,
    x_J += omega * D (A^J)^T r with r = y - A x maintained incrementally
    and D from the scaling rule applied to columns.

    Returns (x, trace); effective_epoch counts full data passes.
    """
    y = as_vector("y", y, length=system.n_measurements)
    A = system.to_scipy().tocsc()
    blocks = []
    for vb in system.partition.col_blocks:
        A_j = A[:, vb.voxel_indices]
        if params.m_rule == "identity":
            d_diag = np.ones(A_j.shape[1])
        elif params.m_rule == "sum_inverse":
            d_diag = _safe_inverse(np.asarray(A_j.sum(axis=0)))
        else:
            d_diag = _safe_inverse(np.asarray(A_j.multiply(A_j).sum(axis=0)))
        blocks.append((A_j, vb.voxel_indices, d_diag))
    x = np.zeros(system.n_voxels)
    r = y.copy()
    trace = ConvergenceTrace()
    started = time.perf_counter()
    for epoch in range(1, params.epochs + 1):
        for A_j, vox, d_diag in blocks:
            dx = params.omega * (d_diag * (A_j.T @ r))
            x[vox] += dx
            r -= A_j @ dx
        row = _baseline_trace_row(epoch, x, y, y - r, x_true, started)
        row.mode = "column_action"
        trace.append(row)
    return x, trace
