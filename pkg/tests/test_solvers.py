"""Solver runners: reference step, epoch dynamics, audits, baselines."""

import math

import numpy as np
import pytest

from blockct import (BaselineParams, BlockSystem, ConfigurationError,
                     DetectorModel, DivergenceError, ProbabilityTable,
                     SamplingConfig, ScanGeometry, ScheduleError,
                     SolverParams, SolverState, SubmatrixHandle, VolumeGrid,
                     audit_state, basic_iteration, build_probability_table,
                     head_phantom, make_circular_trajectory, make_partition,
                     run_column_action, run_csgd, run_gcsgd, run_row_action)

from _oracles import LiteralSequential, dense_basic_step


def _setup(n_views=10, det_px=14, dims=(12, 12), radius=20.0, splits=(2, 2),
           det_splits=2):
    grid = VolumeGrid(dims, (1.0, 1.0))
    det = DetectorModel(det_px, 1.5)
    geo = ScanGeometry(grid, det, make_circular_trajectory(n_views, radius))
    part = make_partition(geo, splits, det_splits)
    table = build_probability_table(geo, part)
    system = BlockSystem.build(geo, part, table=table, cache="always")
    x_true = head_phantom(grid)
    return system, x_true, system.forward(x_true)


# ---------------------------------------------------------------------------
# parameters and state
# ---------------------------------------------------------------------------

def test_solver_params_validation():
    with pytest.raises(ConfigurationError):
        SolverParams(epochs=-1)
    with pytest.raises(ConfigurationError):
        SolverParams(epochs=1, b=0.0)
    with pytest.raises(ConfigurationError):
        SolverParams(epochs=1, group_size=0)
    with pytest.raises(ConfigurationError):
        SolverParams(epochs=1, execution_mode="threaded")
    with pytest.raises(ConfigurationError):
        SolverParams(epochs=1, worker_count=0)
    with pytest.raises(ConfigurationError):
        SolverParams(epochs=1, audit_interval=-1)
    with pytest.raises(ConfigurationError):
        SolverParams(epochs=1, divergence_factor=0.0)


def test_state_initialization():
    system, x_true, y = _setup()
    state = SolverState.initialize(system, y)
    assert not np.any(state.x)
    np.testing.assert_array_equal(state.r, y)
    assert state.epoch == 0 and not np.any(state.counts)

    warm = SolverState.initialize(system, y, x0=x_true)
    np.testing.assert_array_equal(warm.x, x_true)
    # fresh store matches the warm image, so the residual starts at zero
    np.testing.assert_array_equal(warm.r, np.zeros(y.size))

    with pytest.raises(ConfigurationError):
        SolverState.initialize(system, y[:-1])
    with pytest.raises(ConfigurationError):
        SolverState.initialize(system, y, x0=x_true[:-1])


def test_audit_reports_residual_drift():
    system, _, y = _setup()
    state = SolverState.initialize(system, y)
    assert audit_state(state, system)["r_drift"] == 0.0
    state.r[3] += 1e-3
    drift = audit_state(state, system)["r_drift"]
    assert abs(drift - 1e-3 / np.abs(y).max()) < 1e-15


# ---------------------------------------------------------------------------
# reference step against the dense oracle
# ---------------------------------------------------------------------------

def test_basic_iteration_matches_dense_step():
    system, _, _ = _setup(n_views=6, det_px=10, dims=(8, 8), radius=16.0)
    geo, part = system.geometry, system.partition
    A = system.to_scipy().toarray()
    rng = np.random.default_rng(14)
    for _ in range(30):
        rb = part.row_blocks[rng.integers(part.n_row_blocks)]
        vb = part.col_blocks[rng.integers(part.n_col_blocks)]
        h = SubmatrixHandle(geo, rb, vb)
        sub = A[np.ix_(rb.measurement_indices, vb.voxel_indices)]
        r_i = rng.normal(size=rb.size)
        x_j = rng.normal(size=vb.size)
        beta = float(rng.uniform(0.2, 2.0))
        x_new, z_new, mu = basic_iteration(h, r_i, x_j, beta)
        x_ref, z_ref, mu_ref = dense_basic_step(sub, r_i, x_j, beta)
        scale = max(np.abs(x_ref).max(), 1.0)
        assert np.abs(x_new - x_ref).max() <= 1e-10 * scale
        np.testing.assert_allclose(z_new, z_ref, atol=1e-10)
        assert abs(mu - mu_ref) <= 1e-10 * max(abs(mu_ref), 1.0)


def test_basic_iteration_degenerate_and_checks():
    system, _, _ = _setup(n_views=4, det_px=8, dims=(6, 6), radius=14.0)
    part = system.partition
    h = SubmatrixHandle(system.geometry, part.row_blocks[0], part.col_blocks[0])
    x_j = np.random.default_rng(1).normal(size=h.n_cols)
    x_new, z_new, mu = basic_iteration(h, np.zeros(h.n_rows), x_j, 1.0)
    assert mu == 0.0
    np.testing.assert_array_equal(x_new, x_j)
    np.testing.assert_array_equal(z_new, h.apply(x_j))
    with pytest.raises(ConfigurationError):
        basic_iteration(h, np.zeros(h.n_rows), x_j, 0.0)
    with pytest.raises(ConfigurationError):
        basic_iteration(h, np.zeros(h.n_rows + 2), x_j, 1.0)
    with pytest.raises(ConfigurationError):
        basic_iteration(h, np.zeros(h.n_rows), x_j[:-1], 1.0)


# ---------------------------------------------------------------------------
# epoch runner against the literal transcription
# ---------------------------------------------------------------------------

def test_runner_matches_literal_epochs():
    system, x_true, y = _setup(n_views=8, det_px=12, dims=(10, 10), radius=18.0)
    part = system.partition
    A = system.to_scipy().toarray()
    rows = [rb.measurement_indices for rb in part.row_blocks]
    cols = [vb.voxel_indices for vb in part.col_blocks]
    lit = LiteralSequential(A, rows, cols, system.table.values, 6.0)
    for gs, mode, litmode in ((1, "serial_faithful", "sequential"),
                              (1, "parallel", "barrier"),
                              (3, "serial_faithful", "sequential"),
                              (3, "parallel", "barrier")):
        params = SolverParams(epochs=4, b=6.0, group_size=gs, seed=17,
                              execution_mode=mode,
                              sampling=SamplingConfig(alpha=0.5))
        rec = {}
        x, tr = run_gcsgd(system, y, params, x_true=x_true, plan_record=rec)
        sched = {ep: [(j, np.concatenate(groups)) for j, groups in plan]
                 for ep, plan in rec.items()}
        x_lit, _, r_lit = lit.run(y, sched, group_size=gs, mode=litmode)
        scale = max(np.abs(x_lit).max(), 1.0)
        assert np.abs(x - x_lit).max() <= 1e-12 * scale


def test_scripted_replay_is_bitwise_across_storage_modes():
    system, x_true, y = _setup(n_views=8, det_px=12, dims=(10, 10), radius=18.0)
    streamed = BlockSystem.build(system.geometry, system.partition,
                                 table=system.table, cache="never")
    params = SolverParams(epochs=3, b=6.0, group_size=2, seed=23,
                          sampling=SamplingConfig(alpha=0.5))
    rec = {}
    x_cached, _ = run_gcsgd(system, y, params, plan_record=rec)
    sched = {ep: [(j, np.concatenate(groups)) for j, groups in plan]
             for ep, plan in rec.items()}
    x_streamed, _ = run_gcsgd(streamed, y, params, schedule=sched)
    np.testing.assert_array_equal(x_cached, x_streamed)


def test_exact_solution_is_a_fixed_point():
    system, x_true, y = _setup()
    params = SolverParams(epochs=3, b=100.0, seed=0)
    x, tr = run_gcsgd(system, y, params, x0=x_true)
    # zero residual makes every draw degenerate; the image only moves by the
    # rounding of the commit average
    np.testing.assert_allclose(x, x_true, rtol=0.0, atol=1e-13)


def test_trace_rows_and_audits():
    system, x_true, y = _setup()
    params = SolverParams(epochs=6, b=50.0, seed=2, audit_interval=2,
                          sampling=SamplingConfig(alpha=0.5))
    seen = []
    x, tr = run_gcsgd(system, y, params, x_true=x_true,
                      callback=lambda ep, st, row: seen.append(ep))
    assert seen == [1, 2, 3, 4, 5, 6]
    assert [row.epoch for row in tr.rows] == [1, 2, 3, 4, 5, 6]
    for row in tr.rows:
        assert row.effective_epoch == row.epoch * 0.5
        assert math.isfinite(row.snr_db) and math.isfinite(row.obs_gap_db)
        assert row.mode == "serial_faithful"
        assert row.theta == 0.0
        assert row.n_tasks > 0 and row.bytes_moved > 0
    walls = [row.wall_seconds for row in tr.rows]
    assert all(b >= a for a, b in zip(walls, walls[1:]))
    # the exact-refresh bookkeeping leaves nothing to drift
    assert [a["epoch"] for a in tr.audits] == [2, 4, 6]
    assert all(a["r_drift"] == 0.0 for a in tr.audits)

    x0, tr0 = run_gcsgd(system, y, SolverParams(epochs=0, b=50.0))
    assert not np.any(x0) and len(tr0.rows) == 0


def test_snr_improves_on_small_run():
    system, x_true, y = _setup()
    params = SolverParams(epochs=30, b=6.0, seed=3)
    x, tr = run_gcsgd(system, y, params, x_true=x_true)
    snrs = [row.snr_db for row in tr.rows]
    assert snrs[-1] > snrs[0] + 4.0
    assert snrs[-1] == pytest.approx(6.416697928678968, abs=1e-9)


def test_divergence_detector():
    system, x_true, y = _setup()
    params = SolverParams(epochs=60, b=1e5, seed=4)
    with pytest.raises(DivergenceError) as info:
        run_gcsgd(system, y, params, x_true=x_true)
    err = info.value
    assert err.last_good_epoch >= 0
    assert len(err.trace.rows) == err.last_good_epoch + 1

    # a tight growth factor turns ordinary early growth into an abort
    tight = SolverParams(epochs=60, b=20.0, seed=4, divergence_factor=1.0 + 1e-9)
    with pytest.raises(DivergenceError):
        run_gcsgd(system, y, tight)


def test_scripted_visit_of_unreachable_block_fails():
    system, _, y = _setup()
    values = system.table.values.copy()
    values[:, 1] = 0.0
    doctored = BlockSystem.build(system.geometry, system.partition,
                                 table=ProbabilityTable(values, values.sum(axis=0)),
                                 cache="always")
    params = SolverParams(epochs=1, b=50.0)
    with pytest.raises(ScheduleError):
        run_gcsgd(doctored, y, params, schedule={1: [(1, np.array([0, 2]))]})


def test_csgd_requires_ungrouped_draws():
    system, x_true, y = _setup()
    with pytest.raises(ConfigurationError):
        run_csgd(system, y, SolverParams(epochs=1, group_size=2))
    p = SolverParams(epochs=4, b=50.0, seed=6)
    x_a, _ = run_csgd(system, y, p)
    x_b, _ = run_gcsgd(system, y, p)
    np.testing.assert_array_equal(x_a, x_b)


# ---------------------------------------------------------------------------
# whole-system baselines
# ---------------------------------------------------------------------------

def test_baseline_params_validation():
    with pytest.raises(ConfigurationError):
        BaselineParams(epochs=-1)
    with pytest.raises(ConfigurationError):
        BaselineParams(epochs=1, omega=0.0)
    with pytest.raises(ConfigurationError):
        BaselineParams(epochs=1, m_rule="jacobi")


@pytest.mark.parametrize("m_rule", ["identity", "sum_inverse", "norm_inverse"])
def test_row_action_matches_hand_rolled_sweeps(m_rule):
    system, x_true, y = _setup(n_views=6, det_px=10, dims=(8, 8), radius=16.0)
    A = system.to_scipy().toarray()
    omega = 0.4 if m_rule == "identity" else 0.9
    x_ref = np.zeros(system.n_voxels)
    for _ in range(5):
        for rb in system.partition.row_blocks:
            sub = A[rb.measurement_indices]
            if m_rule == "identity":
                m = np.ones(sub.shape[0])
            elif m_rule == "sum_inverse":
                m = sub.sum(axis=1)
                m = np.divide(1.0, m, out=np.zeros_like(m), where=m > 0)
            else:
                m = (sub ** 2).sum(axis=1)
                m = np.divide(1.0, m, out=np.zeros_like(m), where=m > 0)
            x_ref += omega * (sub.T @ (m * (y[rb.measurement_indices] - sub @ x_ref)))
    x, tr = run_row_action(system, y, BaselineParams(epochs=5, omega=omega,
                                                     m_rule=m_rule),
                           x_true=x_true)
    np.testing.assert_allclose(x, x_ref, atol=1e-10)
    assert tr.rows[-1].mode == "row_action"
    assert tr.rows[-1].effective_epoch == 5.0


def test_column_action_matches_hand_rolled_sweeps():
    system, x_true, y = _setup(n_views=6, det_px=10, dims=(8, 8), radius=16.0)
    A = system.to_scipy().toarray()
    omega = 0.9
    x_ref = np.zeros(system.n_voxels)
    r_ref = y.copy()
    for _ in range(5):
        for vb in system.partition.col_blocks:
            sub = A[:, vb.voxel_indices]
            d = (sub ** 2).sum(axis=0)
            d = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
            dx = omega * (d * (sub.T @ r_ref))
            x_ref[vb.voxel_indices] += dx
            r_ref -= sub @ dx
    x, tr = run_column_action(system, y, BaselineParams(epochs=5, omega=omega),
                              x_true=x_true)
    np.testing.assert_allclose(x, x_ref, atol=1e-10)
    # the maintained residual matches a fresh evaluation
    np.testing.assert_allclose(y - A @ x, r_ref, atol=1e-8)
    assert tr.rows[-1].mode == "column_action"
