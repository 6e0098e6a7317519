"""Block-iterative tomographic reconstruction with importance-sampled
measurement blocks."""

from .errors import (BlockCTError, BudgetExceededError, ConfigurationError,
                     DivergenceError, ExecutorError, GeometryError,
                     ScheduleError)
from .geometry import (DetectorBlock, DetectorModel, Partition,
                       ProbabilityTable, ScanGeometry, ViewPose, VolumeGrid,
                       VoxelBlock, build_probability_table,
                       make_circular_trajectory, make_partition,
                       make_random_sphere_trajectory, partition_detector,
                       partition_volume, projection_overlap)
from .projector import (BlockSystem, SparseRow, SubmatrixHandle,
                        dump_triplets, forward_project, trace_ray)
from .sampling import (BlockScheduler, SamplingConfig, ScriptedScheduler,
                       dump_schedule, mixed_weights, parse_schedule,
                       select_column_blocks, select_row_blocks)
from .executor import EpochExecutor, EpochStats, TaskDescriptor
from .solvers import (BaselineParams, SolverParams, SolverState,
                      audit_state, basic_iteration, run_column_action,
                      run_csgd, run_gcsgd, run_row_action)
from .estimators import (ColumnActionReconstructor, CsgdReconstructor,
                         GcsgdReconstructor, RowActionReconstructor)
from .phantoms import (head_phantom, load_volume, make_phantom, save_volume,
                       simulate_projections)
from .metrics import (ConvergenceTrace, TraceRow, observation_gap_db, snr_db)
from .config import ExperimentConfig, parse_config, write_manifest

__version__ = "0.1.0"

__all__ = [
    "BlockCTError", "BudgetExceededError", "ConfigurationError",
    "DivergenceError", "ExecutorError", "GeometryError", "ScheduleError",
    "DetectorBlock", "DetectorModel", "Partition", "ProbabilityTable",
    "ScanGeometry", "ViewPose", "VolumeGrid", "VoxelBlock",
    "build_probability_table", "make_circular_trajectory", "make_partition",
    "make_random_sphere_trajectory", "partition_detector", "partition_volume",
    "projection_overlap",
    "BlockSystem", "SparseRow", "SubmatrixHandle", "dump_triplets",
    "forward_project", "trace_ray",
    "BlockScheduler", "SamplingConfig", "ScriptedScheduler", "dump_schedule",
    "mixed_weights", "parse_schedule", "select_column_blocks",
    "select_row_blocks",
    "EpochExecutor", "EpochStats", "TaskDescriptor",
    "BaselineParams", "SolverParams", "SolverState", "audit_state",
    "basic_iteration", "run_column_action", "run_csgd", "run_gcsgd",
    "run_row_action",
    "ColumnActionReconstructor", "CsgdReconstructor", "GcsgdReconstructor",
    "RowActionReconstructor",
    "head_phantom", "load_volume", "make_phantom", "save_volume",
    "simulate_projections",
    "ConvergenceTrace", "TraceRow", "observation_gap_db", "snr_db",
    "ExperimentConfig", "parse_config", "write_manifest",
    "__version__",
]
