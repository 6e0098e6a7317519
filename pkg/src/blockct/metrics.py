"""Reconstruction quality metrics and per-epoch convergence traces."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

CSV_COLUMNS = ("epoch", "effective_epoch", "snr_db", "obs_gap_db",
               "wall_seconds", "mode", "theta")


def snr_db(x_true, x_est):
    """Signal-to-noise ratio of an estimate against a reference, in dB:
    20 log10(|x_true| / |x_true - x_est|).  An exact match returns inf."""
    x_true = np.asarray(x_true, dtype=np.float64).ravel()
    x_est = np.asarray(x_est, dtype=np.float64).ravel()
    if x_true.shape != x_est.shape:
        raise ConfigurationError(
            f"shape mismatch: reference {x_true.shape}, estimate {x_est.shape}")
    ref = np.linalg.norm(x_true)
    if ref == 0.0:
        raise ConfigurationError("reference signal is identically zero")
    err = np.linalg.norm(x_true - x_est)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(ref / err)


def observation_gap_db(y, y_est):
    """Agreement of estimated with measured observations, in dB; same form
    as snr_db with the measurements as reference."""
    return snr_db(y, y_est)


@dataclass
class TraceRow:
    """One epoch of a run.  ``effective_epoch`` counts work in units of full
    sweeps over the measurement blocks (epoch index times the drawn
    fraction), which is what makes runs with different draw fractions
    comparable."""

    epoch: int
    effective_epoch: float
    snr_db: float
    obs_gap_db: float
    wall_seconds: float
    mode: str
    theta: float
    bytes_moved: int = 0
    n_tasks: int = 0


@dataclass
class ConvergenceTrace:
    """Per-epoch rows plus any audit records collected during a run."""

    rows: list = field(default_factory=list)
    audits: list = field(default_factory=list)

    def append(self, row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    @property
    def final_snr_db(self):
        if not self.rows:
            raise ConfigurationError("trace is empty")
        return self.rows[-1].snr_db

    @property
    def max_snr_db(self):
        if not self.rows:
            raise ConfigurationError("trace is empty")
        return max(r.snr_db for r in self.rows)

    def snr_at_effective(self, target):
        """SNR at an effective-epoch coordinate, linearly interpolated
        between the two surrounding rows."""
        if not self.rows:
            raise ConfigurationError("trace is empty")
        xs = np.array([r.effective_epoch for r in self.rows])
        ys = np.array([r.snr_db for r in self.rows])
        if target < xs[0] or target > xs[-1]:
            raise ConfigurationError(
                f"effective epoch {target} outside trace range [{xs[0]}, {xs[-1]}]")
        return float(np.interp(target, xs, ys))

    def to_csv(self, path):
        """Write the pinned seven-column schema; extra in-memory fields
        (bytes, task counts) are deliberately not serialized."""
        with open(path, "w", encoding="ascii", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow([r.epoch, f"{r.effective_epoch:.12g}",
                                 f"{r.snr_db:.12g}", f"{r.obs_gap_db:.12g}",
                                 f"{r.wall_seconds:.12g}", r.mode,
                                 f"{r.theta:.12g}"])

    @classmethod
    def from_csv(cls, path):
        trace = cls()
        with open(path, "r", encoding="ascii", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != CSV_COLUMNS:
                raise ConfigurationError(f"unexpected trace header: {header}")
            for row in reader:
                trace.append(TraceRow(epoch=int(row[0]),
                                      effective_epoch=float(row[1]),
                                      snr_db=float(row[2]),
                                      obs_gap_db=float(row[3]),
                                      wall_seconds=float(row[4]),
                                      mode=row[5],
                                      theta=float(row[6])))
        return trace
