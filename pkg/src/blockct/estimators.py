"""Estimator-style wrappers around the solvers.

Each reconstructor is configured up front, consumes a measurement vector in
``fit``, and exposes the result as fitted attributes: ``image_`` (grid
shaped), ``trace_`` (per-epoch ConvergenceTrace), and ``system_`` (the
blocked operator, reusable across fits via the ``system`` argument).
Parameter handling follows the usual get_params/set_params protocol.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigurationError
from .geometry import build_probability_table, make_partition
from .projector import BlockSystem
from .sampling import SamplingConfig
from .solvers import (BaselineParams, SolverParams, run_column_action,
                      run_gcsgd, run_row_action)


class _BlockedReconstructor(BaseEstimator):
    """Shared plumbing: build (or reuse) the blocked system for the
    configured geometry and partition."""

    def __init__(self, geometry=None, volume_splits=(1, 1, 1),
                 detector_splits=(1, 1), cache="auto", budget_bytes=None):
        self.geometry = geometry
        self.volume_splits = volume_splits
        self.detector_splits = detector_splits
        self.cache = cache
        self.budget_bytes = budget_bytes

    def _build_system(self, system):
        if system is not None:
            return system
        if self.geometry is None:
            raise ConfigurationError("geometry is required to fit")
        partition = make_partition(self.geometry, self.volume_splits,
                                   self.detector_splits)
        table = build_probability_table(self.geometry, partition)
        return BlockSystem.build(self.geometry, partition, table,
                                 cache=self.cache, budget_bytes=self.budget_bytes)

    def _finish(self, system, x, trace):
        self.system_ = system
        self.image_ = np.asarray(x).reshape(system.geometry.grid.dims)
        self.trace_ = trace
        return self


class GcsgdReconstructor(_BlockedReconstructor):
    """Grouped stochastic block solver behind the estimator protocol.

    Parameters mirror SolverParams and SamplingConfig; ``fit(y, x_true=...)``
    reconstructs from a measurement vector and records a per-epoch trace
    (snr_db only when a reference volume is supplied).
    """

    def __init__(self, geometry=None, volume_splits=(1, 1, 1),
                 detector_splits=(1, 1), epochs=10, b=100.0,
                 strategy="importance", alpha=1.0, gamma=1.0,
                 theta0=0.0, theta_step=0.0, group_size=1,
                 execution_mode="serial_faithful", worker_count=1,
                 audit_interval=0, seed=None, cache="auto", budget_bytes=None):
        super().__init__(geometry, volume_splits, detector_splits, cache,
                         budget_bytes)
        self.epochs = epochs
        self.b = b
        self.strategy = strategy
        self.alpha = alpha
        self.gamma = gamma
        self.theta0 = theta0
        self.theta_step = theta_step
        self.group_size = group_size
        self.execution_mode = execution_mode
        self.worker_count = worker_count
        self.audit_interval = audit_interval
        self.seed = seed

    def _solver_params(self):
        sampling = SamplingConfig(strategy=self.strategy, alpha=self.alpha,
                                  gamma=self.gamma, theta0=self.theta0,
                                  theta_step=self.theta_step)
        return SolverParams(epochs=self.epochs, b=self.b, sampling=sampling,
                            group_size=self.group_size,
                            execution_mode=self.execution_mode,
                            worker_count=self.worker_count,
                            audit_interval=self.audit_interval, seed=self.seed)

    def fit(self, y, x_true=None, system=None, schedule=None):
        system = self._build_system(system)
        x, trace = run_gcsgd(system, y, self._solver_params(), x_true=x_true,
                             schedule=schedule)
        return self._finish(system, x, trace)


class CsgdReconstructor(GcsgdReconstructor):
    """Ungrouped variant: every basic iteration draws a single measurement
    block (group_size pinned to 1)."""

    def __init__(self, geometry=None, volume_splits=(1, 1, 1),
                 detector_splits=(1, 1), epochs=10, b=100.0,
                 strategy="importance", alpha=1.0, gamma=1.0,
                 theta0=0.0, theta_step=0.0,
                 execution_mode="serial_faithful", worker_count=1,
                 audit_interval=0, seed=None, cache="auto", budget_bytes=None):
        super().__init__(geometry=geometry, volume_splits=volume_splits,
                         detector_splits=detector_splits, epochs=epochs, b=b,
                         strategy=strategy, alpha=alpha, gamma=gamma,
                         theta0=theta0, theta_step=theta_step, group_size=1,
                         execution_mode=execution_mode,
                         worker_count=worker_count,
                         audit_interval=audit_interval, seed=seed,
                         cache=cache, budget_bytes=budget_bytes)


class RowActionReconstructor(_BlockedReconstructor):
    """Cyclic row-action baseline behind the estimator protocol."""

    def __init__(self, geometry=None, volume_splits=(1, 1, 1),
                 detector_splits=(1, 1), epochs=10, omega=1.0,
                 m_rule="norm_inverse", cache="auto", budget_bytes=None):
        super().__init__(geometry, volume_splits, detector_splits, cache,
                         budget_bytes)
        self.epochs = epochs
        self.omega = omega
        self.m_rule = m_rule

    def fit(self, y, x_true=None, system=None):
        system = self._build_system(system)
        params = BaselineParams(epochs=self.epochs, omega=self.omega,
                                m_rule=self.m_rule)
        x, trace = run_row_action(system, y, params, x_true=x_true)
        return self._finish(system, x, trace)


class ColumnActionReconstructor(_BlockedReconstructor):
    """Cyclic column-action baseline behind the estimator protocol."""

    def __init__(self, geometry=None, volume_splits=(1, 1, 1),
                 detector_splits=(1, 1), epochs=10, omega=1.0,
                 m_rule="norm_inverse", cache="auto", budget_bytes=None):
        super().__init__(geometry, volume_splits, detector_splits, cache,
                         budget_bytes)
        self.epochs = epochs
        self.omega = omega
        self.m_rule = m_rule

    def fit(self, y, x_true=None, system=None):
        system = self._build_system(system)
        params = BaselineParams(epochs=self.epochs, omega=self.omega,
                                m_rule=self.m_rule)
        x, trace = run_column_action(system, y, params, x_true=x_true)
        return self._finish(system, x, trace)
