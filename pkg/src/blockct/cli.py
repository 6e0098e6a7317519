"""Command-line experiment runner.

``blockct run <config> [--override section.key=value ...]`` loads a config,
writes the resolved manifest, simulates measurements of the configured
phantom, reconstructs, and drops the outputs into the configured directory:

- ``manifest.ini``: resolved configuration (written before solving)
- ``trace.csv``: one row per epoch
- ``recon.raw`` + ``recon.raw.hdr``: the final volume
- ``slice_*.pgm`` + ``.window`` sidecar: normalized preview slice
- ``schedule.txt``: realized block selections (opt-in)

Exit codes: 0 success, 2 invalid configuration or geometry, 3 divergence
(the partial trace is still written), 4 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import parse_config, write_manifest
from .errors import BlockCTError, ConfigurationError, DivergenceError
from .geometry import build_probability_table
from .phantoms import make_phantom, save_volume, simulate_projections
from .projector import BlockSystem
from .sampling import dump_schedule
from .solvers import run_column_action, run_gcsgd, run_row_action

logger = logging.getLogger(__name__)

_AXIS_LETTERS = ("x", "y", "z")


def _write_pgm(path, plane):
    """8-bit binary PGM of a 2D slice, windowed to its own value range; the
    window bounds go to a text sidecar.  A constant slice maps to mid-gray."""
    lo = float(plane.min())
    hi = float(plane.max())
    if hi > lo:
        img = np.clip(np.rint(255.0 * (plane - lo) / (hi - lo)), 0, 255)
    else:
        img = np.full(plane.shape, 128.0)
    img = img.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    with open(str(path) + ".window", "w", encoding="ascii") as fh:
        fh.write(f"min: {lo!r}\nmax: {hi!r}\n")


def _export_slice(outdir, volume, grid, axis, index):
    vol = np.asarray(volume).reshape(grid.dims)
    if index < 0:
        index = grid.dims[axis] // 2
    if index >= grid.dims[axis]:
        raise ConfigurationError(
            f"slice_index {index} out of range for axis of size {grid.dims[axis]}")
    plane = np.take(vol, index, axis=axis)
    name = f"slice_{_AXIS_LETTERS[axis]}{index:04d}.pgm"
    _write_pgm(outdir / name, plane)
    return name


def _execute(cfg, outdir):
    geometry = cfg.build_geometry()
    partition = cfg.build_partition(geometry)
    table = build_probability_table(geometry, partition)
    budget = cfg.get("solver", "budget_bytes") or None
    system = BlockSystem.build(geometry, partition, table,
                               cache=cfg.get("solver", "cache"),
                               budget_bytes=budget)

    phantom_kind = cfg.get("phantom", "kind")
    phantom = make_phantom(phantom_kind, geometry.grid,
                           path=cfg.get("phantom", "path") or None)
    _, noise_seed, _ = cfg.seeds()
    y = simulate_projections(phantom, geometry, noise=cfg.get("phantom", "noise"),
                             sigma=cfg.get("phantom", "sigma"), seed=noise_seed)

    algorithm = cfg.get("solver", "algorithm")
    plan_record = {} if cfg.get("io", "dump_schedule") else None
    try:
        if algorithm in ("csgd", "gcsgd"):
            x, trace = run_gcsgd(system, y, cfg.solver_params(), x_true=phantom,
                                 plan_record=plan_record)
        elif algorithm == "row_action":
            x, trace = run_row_action(system, y, cfg.baseline_params(),
                                      x_true=phantom)
        else:
            x, trace = run_column_action(system, y, cfg.baseline_params(),
                                         x_true=phantom)
    except DivergenceError as exc:
        if exc.trace is not None:
            exc.trace.to_csv(outdir / "trace.csv")
        raise
    finally:
        if plan_record:
            dump_schedule(plan_record, outdir / "schedule.txt")

    trace.to_csv(outdir / "trace.csv")
    save_volume(outdir / "recon.raw", x, geometry.grid,
                dtype=cfg.get("io", "recon_dtype"))
    written = ["manifest.ini", "trace.csv", "recon.raw"]
    if cfg.get("io", "export_slices"):
        written.append(_export_slice(outdir, x, geometry.grid,
                                     cfg.get("io", "slice_axis"),
                                     cfg.get("io", "slice_index")))
    if len(trace):
        print(f"finished {len(trace)} epochs, final snr {trace.final_snr_db:.2f} dB")
    else:
        print("finished 0 epochs")
    print("wrote " + " ".join(written) + f" to {outdir}")
    return 0


def _cmd_run(args):
    try:
        cfg = parse_config(args.config, args.override)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    outdir = Path(cfg.get("io", "output_dir"))
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        write_manifest(cfg, outdir / "manifest.ini")
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    try:
        return _execute(cfg, outdir)
    except DivergenceError as exc:
        print(f"divergence: {exc} (last good epoch {exc.last_good_epoch}; "
              f"partial trace written)", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except BlockCTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="blockct",
        description="block-iterative tomographic reconstruction experiments")
    parser.add_argument("--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run one experiment from a config file")
    runp.add_argument("config", help="path to the INI config")
    runp.add_argument("--override", action="append", default=[],
                      metavar="SECTION.KEY=VALUE",
                      help="replace a config value (repeatable)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return _cmd_run(args)
    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
