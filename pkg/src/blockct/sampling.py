"""Block selection: which volume blocks each epoch visits and which
measurement blocks each inner loop draws.

Measurement blocks are drawn without replacement with probability
proportional to a weight table (shadow overlap areas for the importance
strategy).  Draws are realized with the exponential-race construction: give
every in-scope block an independent Exp(1)/w key and take blocks in
ascending key order.  The resulting sequence has the same distribution as
sequential weighted draws without replacement, consumes the same number of
generator variates regardless of weights, and is invariant to rescaling the
weights.  Consequences used by the tests: the uniform strategy equals the
mixed strategy at theta = 1, the importance strategy equals mixed at
theta = 0, and grouping draws changes nothing about the sequence itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ScheduleError
from .validation import check_choice, check_count, check_fraction, check_unit_interval

STRATEGIES = ("importance", "random", "mixed")


@dataclass(frozen=True)
class SamplingConfig:
    """How blocks are drawn.

    Parameters
    ----------
    strategy : str
        "importance" (weights = overlap areas), "random" (uniform over
        in-scope blocks), or "mixed" (areas flattened toward uniform by a
        per-epoch blend parameter theta).
    alpha : float
        Fraction of the measurement blocks drawn per inner loop, in (0, 1].
    gamma : float
        Fraction of the volume blocks visited per epoch, in (0, 1].
    theta0 : float
        Starting blend for "mixed", in [0, 1].
    theta_step : float
        Per-epoch increment of theta for "mixed", in [0, 1].
    """

    strategy: str = "importance"
    alpha: float = 1.0
    gamma: float = 1.0
    theta0: float = 0.0
    theta_step: float = 0.0

    def __post_init__(self):
        check_choice("strategy", self.strategy, STRATEGIES)
        check_fraction("alpha", self.alpha)
        check_fraction("gamma", self.gamma)
        check_unit_interval("theta0", self.theta0)
        check_unit_interval("theta_step", self.theta_step)


def mixed_weights(raw, theta):
    """Blend raw weights toward uniform over the in-scope (raw > 0) blocks.

    w_i = raw_i + theta * (max(raw) - raw_i) for in-scope i, 0 elsewhere.
    theta = 0 returns the raw weights; theta = 1 is constant over in-scope
    blocks.  Out-of-scope blocks stay at zero for every theta.
    """
    raw = np.asarray(raw, dtype=np.float64)
    out = np.zeros_like(raw)
    scope = raw > 0.0
    if not np.any(scope):
        return out
    top = raw[scope].max()
    out[scope] = raw[scope] + theta * (top - raw[scope])
    return out


def select_column_blocks(eligible, gamma, rng):
    """Draw ceil(gamma * n) distinct volume block ids uniformly, in draw order."""
    eligible = np.asarray(eligible, dtype=np.int64)
    n = eligible.size
    if n == 0:
        raise ScheduleError("no volume block has any selectable measurement block")
    k = math.ceil(gamma * n)
    return eligible[rng.choice(n, size=k, replace=False)]


def select_row_blocks(weights, k, rng):
    """Draw k distinct in-scope block ids, weighted, without replacement.

    Returns ids into ``weights`` in draw order.  The generator consumes one
    exponential variate per in-scope block no matter what k is.
    """
    weights = np.asarray(weights, dtype=np.float64)
    scope = np.flatnonzero(weights > 0.0)
    keys = rng.exponential(size=scope.size)
    if k > scope.size:
        raise ScheduleError(f"cannot draw {k} blocks from {scope.size} in scope")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    keys = keys / weights[scope]
    order = np.argsort(keys, kind="stable")
    return scope[order[:k]]


def _chunk(ids, size):
    return [ids[p:p + size] for p in range(0, ids.size, size)]


class BlockScheduler:
    """Per-epoch selection plan driven by a probability table.

    ``epoch_plan`` returns ``[(j, groups), ...]`` in execution order, where
    ``groups`` is a list of measurement-block id arrays; each group is one
    basic iteration.  The draw budget per volume block is ceil(alpha * m)
    rounded up to whole groups of ``group_size``, capped by the number of
    in-scope blocks (draws are without replacement, so the cap is hard).
    """

    def __init__(self, table, config, group_size=1):
        check_count("group_size", group_size, minimum=1)
        self.table = table
        self.config = config
        self.group_size = int(group_size)
        if config.strategy == "importance":
            self.theta = 0.0
        elif config.strategy == "random":
            self.theta = 1.0
        else:
            self.theta = config.theta0

    def _weights(self, j):
        raw = self.table.values[:, j]
        if self.config.strategy == "importance":
            return raw
        return mixed_weights(raw, self.theta)

    def epoch_plan(self, epoch, rng):
        cfg = self.config
        m = self.table.values.shape[0]
        target = math.ceil(cfg.alpha * m)
        plan = []
        for j in select_column_blocks(self.table.active_cols, cfg.gamma, rng):
            weights = self._weights(int(j))
            scope_n = int(np.count_nonzero(weights > 0.0))
            draws = self.group_size * math.ceil(target / self.group_size)
            draws = min(draws, scope_n)
            ids = select_row_blocks(weights, draws, rng)
            plan.append((int(j), _chunk(ids, self.group_size)))
        return plan

    def advance_epoch(self):
        """Move theta one step toward uniform (mixed strategy only)."""
        if self.config.strategy == "mixed":
            self.theta = min(1.0, self.theta + self.config.theta_step)


@dataclass
class ScriptedScheduler:
    """Replays a dumped selection schedule instead of sampling.

    ``entries`` maps epoch -> list of (j, ids) in execution order; ids are
    the draw sequence of one volume-block visit and are regrouped by
    ``group_size`` exactly as the sampling scheduler would have grouped them.
    """

    entries: dict
    group_size: int = 1
    theta: float = field(default=0.0)

    def epoch_plan(self, epoch, rng):
        if epoch not in self.entries:
            raise ScheduleError(f"schedule has no entries for epoch {epoch}")
        plan = []
        for j, ids in self.entries[epoch]:
            plan.append((j, _chunk(np.asarray(ids, dtype=np.int64), self.group_size)))
        return plan

    def advance_epoch(self):
        pass


def dump_schedule(plans, path):
    """Write per-epoch plans as text: one line per volume-block visit,
    ``epoch j i1 i2 ...`` with ids in draw order."""
    with open(path, "w", encoding="ascii") as fh:
        for epoch in sorted(plans):
            for j, groups in plans[epoch]:
                ids = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups])
                fh.write(f"{epoch} {j} " + " ".join(str(int(i)) for i in ids) + "\n")


def parse_schedule(path, n_row_blocks=None, n_col_blocks=None):
    """Parse a dumped schedule back into ScriptedScheduler entries.

    Blank lines and ``#`` comments are skipped.  Ids are validated against
    the block counts when given; duplicate measurement blocks within one
    line are rejected (draws are without replacement).
    """
    entries = {}
    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) < 3:
                raise ScheduleError(f"line {ln}: need 'epoch j i...', got {body!r}")
            try:
                nums = [int(p) for p in parts]
            except ValueError as exc:
                raise ScheduleError(f"line {ln}: non-integer token") from exc
            epoch, j, ids = nums[0], nums[1], np.array(nums[2:], dtype=np.int64)
            if epoch < 0 or j < 0 or np.any(ids < 0):
                raise ScheduleError(f"line {ln}: negative id")
            if n_col_blocks is not None and j >= n_col_blocks:
                raise ScheduleError(f"line {ln}: volume block {j} out of range")
            if n_row_blocks is not None and np.any(ids >= n_row_blocks):
                raise ScheduleError(f"line {ln}: measurement block out of range")
            if np.unique(ids).size != ids.size:
                raise ScheduleError(f"line {ln}: repeated measurement block")
            entries.setdefault(epoch, []).append((j, ids))
    return entries
