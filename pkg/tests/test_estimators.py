"""Estimator protocol wrappers over the solver runners."""

import numpy as np
import pytest
from sklearn.base import clone

from blockct import (BlockSystem, ColumnActionReconstructor, ConfigurationError,
                     CsgdReconstructor, DetectorModel, GcsgdReconstructor,
                     RowActionReconstructor, SamplingConfig, ScanGeometry,
                     SolverParams, VolumeGrid, build_probability_table,
                     head_phantom, make_circular_trajectory, make_partition,
                     run_gcsgd, run_row_action)


def _geometry():
    grid = VolumeGrid((10, 10), (1.0, 1.0))
    det = DetectorModel(12, 1.5)
    return ScanGeometry(grid, det, make_circular_trajectory(8, 18.0))


def _measurements(geo):
    part = make_partition(geo, (2, 2), 2)
    table = build_probability_table(geo, part)
    system = BlockSystem.build(geo, part, table=table, cache="always")
    x_true = head_phantom(geo.grid)
    return system, x_true, system.forward(x_true)


def test_params_round_trip_and_clone():
    est = GcsgdReconstructor(geometry=None, epochs=7, b=3.5, group_size=4,
                             strategy="mixed", theta_step=0.1, seed=9)
    params = est.get_params()
    assert params["epochs"] == 7
    assert params["b"] == 3.5
    assert params["group_size"] == 4
    assert params["strategy"] == "mixed"
    est.set_params(epochs=2, alpha=0.5)
    assert est.epochs == 2
    assert est.alpha == 0.5
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "image_")


def test_fit_matches_direct_runner():
    geo = _geometry()
    system, x_true, y = _measurements(geo)
    est = GcsgdReconstructor(geometry=geo, volume_splits=(2, 2),
                             detector_splits=2, epochs=5, b=6.0,
                             group_size=2, alpha=0.5, seed=21,
                             cache="always")
    est.fit(y, x_true=x_true)
    assert est.image_.shape == geo.grid.dims
    assert len(est.trace_) == 5
    assert np.isfinite(est.trace_.final_snr_db)

    params = SolverParams(epochs=5, b=6.0, group_size=2, seed=21,
                          sampling=SamplingConfig(strategy="importance",
                                                  alpha=0.5))
    x, trace = run_gcsgd(system, y, params, x_true=x_true)
    np.testing.assert_array_equal(est.image_.ravel(), x)
    assert [r.snr_db for r in est.trace_.rows] == \
        [r.snr_db for r in trace.rows]


def test_fit_without_reference_leaves_snr_unset():
    geo = _geometry()
    _, _, y = _measurements(geo)
    est = GcsgdReconstructor(geometry=geo, volume_splits=(2, 2),
                             detector_splits=2, epochs=2, b=6.0, seed=0)
    est.fit(y)
    assert all(np.isnan(r.snr_db) for r in est.trace_.rows)
    assert all(np.isfinite(r.obs_gap_db) for r in est.trace_.rows)


def test_prebuilt_system_is_reused():
    geo = _geometry()
    system, x_true, y = _measurements(geo)
    est = GcsgdReconstructor(epochs=3, b=6.0, seed=4)   # no geometry at all
    est.fit(y, x_true=x_true, system=system)
    assert est.system_ is system
    first = est.image_.copy()
    est.fit(y, x_true=x_true, system=est.system_)
    np.testing.assert_array_equal(est.image_, first)


def test_fit_requires_geometry_or_system():
    with pytest.raises(ConfigurationError):
        GcsgdReconstructor(epochs=1).fit(np.zeros(4))


def test_csgd_variant_pins_group_size():
    geo = _geometry()
    system, x_true, y = _measurements(geo)
    est = CsgdReconstructor(geometry=geo, volume_splits=(2, 2),
                            detector_splits=2, epochs=4, b=6.0, seed=13)
    assert est.group_size == 1
    assert "group_size" not in est.get_params()
    est.fit(y, x_true=x_true)
    grouped = GcsgdReconstructor(geometry=geo, volume_splits=(2, 2),
                                 detector_splits=2, epochs=4, b=6.0,
                                 group_size=1, seed=13)
    grouped.fit(y, x_true=x_true)
    np.testing.assert_array_equal(est.image_, grouped.image_)


def test_baseline_estimators_match_runners():
    geo = _geometry()
    system, x_true, y = _measurements(geo)
    row = RowActionReconstructor(geometry=geo, volume_splits=(2, 2),
                                 detector_splits=2, epochs=3, omega=0.8,
                                 m_rule="sum_inverse")
    row.fit(y, x_true=x_true)
    assert len(row.trace_) == 3
    from blockct import BaselineParams
    x, _ = run_row_action(system, y,
                          BaselineParams(epochs=3, omega=0.8,
                                         m_rule="sum_inverse"),
                          x_true=x_true)
    np.testing.assert_array_equal(row.image_.ravel(), x)

    col = ColumnActionReconstructor(geometry=geo, volume_splits=(2, 2),
                                    detector_splits=2, epochs=3)
    col.fit(y, x_true=x_true)
    assert col.image_.shape == geo.grid.dims
    assert np.all(np.isfinite(col.image_))
    assert col.trace_.rows[-1].mode == "column_action"
