"""Experiment configuration: a small INI schema, command-line overrides,
and resolved-run manifests.

Every key has a declared type and default; unknown sections or keys are
rejected by name (with the source line when it can be found) instead of
being silently ignored.  A run's manifest is itself a valid config file
with every value resolved, so a finished or crashed run can be repeated
from its output directory alone.

One master seed drives all randomness; per-purpose seeds (trajectory,
noise, sampling) are derived from it by seed-sequence spawning and recorded
in the manifest as comments.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .geometry import (VolumeGrid, DetectorModel, ScanGeometry,
                       make_circular_trajectory,
                       make_random_sphere_trajectory, make_partition)
from .phantoms import PHANTOM_KINDS
from .sampling import STRATEGIES, SamplingConfig
from .solvers import M_RULES, BaselineParams, SolverParams
from .executor import EXECUTION_MODES

ALGORITHMS = ("csgd", "gcsgd", "row_action", "column_action")
TRAJECTORIES = ("circular", "random_sphere")

# section -> key -> (kind, default); kind is one of
# int, float, bool, str, ints (whitespace-separated), floats
_SCHEMA = {
    "geometry": {
        "trajectory": ("str", "circular"),
        "n_views": ("int", None),
        "radius": ("float", None),
        "source_detector_distance": ("float", 0.0),
        "angular_start": ("float", 0.0),
        "grid_dims": ("ints", None),
        "grid_voxel_size": ("floats", (1.0,)),
        "grid_origin": ("floats", ()),
        "detector_pixels": ("ints", None),
        "detector_spacing": ("floats", (1.0,)),
    },
    "phantom": {
        "kind": ("str", "shepp_logan_2d"),
        "path": ("str", ""),
        "noise": ("str", "none"),
        "sigma": ("float", 0.0),
    },
    "partition": {
        "volume_splits": ("ints", (1, 1, 1)),
        "detector_splits": ("ints", (1, 1)),
    },
    "solver": {
        "algorithm": ("str", "csgd"),
        "epochs": ("int", 10),
        "b": ("float", 100.0),
        "strategy": ("str", "importance"),
        "alpha": ("float", 1.0),
        "gamma": ("float", 1.0),
        "theta0": ("float", 0.0),
        "theta_step": ("float", 0.0),
        "group_size": ("int", 1),
        "execution_mode": ("str", "serial_faithful"),
        "worker_count": ("int", 1),
        "audit_interval": ("int", 0),
        "divergence_factor": ("float", 1e6),
        "omega": ("float", 1.0),
        "m_rule": ("str", "norm_inverse"),
        "cache": ("str", "auto"),
        "budget_bytes": ("int", 0),
        "seed": ("int", 0),
    },
    "io": {
        "output_dir": ("str", "."),
        "recon_dtype": ("str", "float64"),
        "export_slices": ("bool", True),
        "slice_axis": ("int", 2),
        "slice_index": ("int", -1),
        "dump_schedule": ("bool", False),
    },
}

_REQUIRED = {
    "geometry": ("n_views", "radius", "grid_dims", "detector_pixels"),
}

_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def _find_line(text, section, key):
    """Best-effort line number of a key within its section, for messages."""
    if text is None:
        return None
    in_section = False
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("["):
            in_section = stripped == f"[{section}]"
        elif in_section and stripped.split("=", 1)[0].split(":", 1)[0].strip() == key:
            return ln
    return None


def _convert(section, key, kind, raw):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            word = str(raw).strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[word]
        if kind == "ints":
            return tuple(int(t) for t in str(raw).split())
        if kind == "floats":
            return tuple(float(t) for t in str(raw).split())
        return str(raw).strip()
    except ValueError as exc:
        raise ConfigurationError(
            f"[{section}] {key}: cannot parse {raw!r} as {kind}") from exc


@dataclass
class ExperimentConfig:
    """Typed view of one experiment: nested dict of resolved values plus
    builders for the objects a run needs."""

    values: dict

    # -- access -------------------------------------------------------------

    def get(self, section, key):
        return self.values[section][key]

    # -- builders -------------------------------------------------------------

    def seeds(self):
        """(trajectory, noise, sampling) seeds derived from the master."""
        ss = np.random.SeedSequence(self.get("solver", "seed"))
        return tuple(int(s) for s in ss.generate_state(3, dtype=np.uint64))

    def build_grid(self):
        g = self.values["geometry"]
        dims = g["grid_dims"]
        if len(dims) not in (2, 3):
            raise ConfigurationError("grid_dims needs 2 or 3 entries")
        vs = g["grid_voxel_size"]
        if len(vs) == 1:
            vs = vs * len(dims)
        origin = g["grid_origin"] or None
        return VolumeGrid(dims, vs, origin=origin)

    def build_detector(self):
        g = self.values["geometry"]
        px = g["detector_pixels"]
        if len(px) not in (1, 2):
            raise ConfigurationError("detector_pixels needs 1 or 2 entries")
        sp = g["detector_spacing"]
        if len(sp) == 1 and len(px) == 2:
            sp = sp * 2
        return DetectorModel(px, sp)

    def build_geometry(self):
        g = self.values["geometry"]
        if g["trajectory"] not in TRAJECTORIES:
            raise ConfigurationError(f"unknown trajectory {g['trajectory']!r}")
        grid = self.build_grid()
        detector = self.build_detector()
        if g["trajectory"] == "circular":
            poses = make_circular_trajectory(g["n_views"], g["radius"],
                                             angular_start=g["angular_start"])
        else:
            dist = g["source_detector_distance"]
            if dist <= 0:
                raise ConfigurationError(
                    "random_sphere requires source_detector_distance > 0")
            poses = make_random_sphere_trajectory(g["n_views"], g["radius"],
                                                  dist, seed=self.seeds()[0])
        return ScanGeometry(grid, detector, tuple(poses))

    def build_partition(self, geometry):
        p = self.values["partition"]
        return make_partition(geometry, p["volume_splits"], p["detector_splits"])

    def solver_params(self):
        s = self.values["solver"]
        sampling = SamplingConfig(strategy=s["strategy"], alpha=s["alpha"],
                                  gamma=s["gamma"], theta0=s["theta0"],
                                  theta_step=s["theta_step"])
        return SolverParams(epochs=s["epochs"], b=s["b"], sampling=sampling,
                            group_size=s["group_size"],
                            execution_mode=s["execution_mode"],
                            worker_count=s["worker_count"],
                            audit_interval=s["audit_interval"],
                            divergence_factor=s["divergence_factor"],
                            seed=self.seeds()[2])

    def baseline_params(self):
        s = self.values["solver"]
        return BaselineParams(epochs=s["epochs"], omega=s["omega"],
                              m_rule=s["m_rule"])

    # -- validation beyond types ---------------------------------------------

    def check(self):
        s = self.values["solver"]
        if s["algorithm"] not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {s['algorithm']!r}")
        if s["algorithm"] == "csgd" and s["group_size"] != 1:
            raise ConfigurationError(
                "algorithm csgd updates one measurement block at a time; "
                "set group_size = 1 or use gcsgd")
        if s["strategy"] not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {s['strategy']!r}")
        if s["execution_mode"] not in EXECUTION_MODES:
            raise ConfigurationError(
                f"unknown execution_mode {s['execution_mode']!r}")
        if s["m_rule"] not in M_RULES:
            raise ConfigurationError(f"unknown m_rule {s['m_rule']!r}")
        if s["cache"] not in ("auto", "always", "never"):
            raise ConfigurationError(f"unknown cache policy {s['cache']!r}")
        ph = self.values["phantom"]
        if ph["kind"] not in PHANTOM_KINDS:
            raise ConfigurationError(f"unknown phantom kind {ph['kind']!r}")
        if ph["noise"] not in ("none", "gaussian"):
            raise ConfigurationError(f"unknown noise model {ph['noise']!r}")
        io = self.values["io"]
        if io["recon_dtype"] not in ("float32", "float64"):
            raise ConfigurationError(f"unknown recon_dtype {io['recon_dtype']!r}")
        if io["slice_axis"] not in (0, 1, 2):
            raise ConfigurationError("slice_axis must be 0, 1, or 2")
        return self


def _resolve(parser, text):
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                ln = _find_line(text, section, key)
                where = f" (line {ln})" if ln else ""
                raise ConfigurationError(
                    f"unknown key {key!r} in section [{section}]{where}")
    for section, keys in _SCHEMA.items():
        values[section] = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                values[section][key] = _convert(section, key, kind,
                                                parser.get(section, key))
            else:
                values[section][key] = default
    for section, required in _REQUIRED.items():
        for key in required:
            if values[section][key] is None:
                raise ConfigurationError(
                    f"missing required key {key!r} in section [{section}]")
    return values


def parse_config(path, overrides=()):
    """Load and validate a config file, then apply ``section.key=value``
    override strings on top."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    values = _resolve(parser, text)
    for item in overrides:
        _apply_override(values, item)
    return ExperimentConfig(values).check()


def _apply_override(values, item):
    head, sep, raw = item.partition("=")
    if not sep:
        raise ConfigurationError(f"override {item!r} is not section.key=value")
    section, dot, key = head.strip().partition(".")
    key = key.strip()
    if not dot or section not in _SCHEMA:
        raise ConfigurationError(f"override {item!r}: unknown section {section!r}")
    if key not in _SCHEMA[section]:
        raise ConfigurationError(f"override {item!r}: unknown key {key!r}")
    kind, _ = _SCHEMA[section][key]
    values[section][key] = _convert(section, key, kind, raw.strip())


def _format_value(kind, value):
    if kind in ("ints", "floats"):
        return " ".join(f"{v:.17g}" if kind == "floats" else str(v)
                        for v in value)
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return f"{value:.17g}"
    return str(value)


def write_manifest(config, path):
    """Write the fully resolved configuration, including defaulted keys, as
    a re-runnable config file; derived per-purpose seeds go in as comments."""
    traj_seed, noise_seed, sampling_seed = config.seeds()
    lines = ["# resolved run manifest; the file is itself a valid config"]
    for section, keys in _SCHEMA.items():
        lines.append("")
        lines.append(f"[{section}]")
        for key, (kind, _) in keys.items():
            value = config.values[section][key]
            if value is None:
                continue
            lines.append(f"{key} = {_format_value(kind, value)}")
        if section == "solver":
            lines.append(f"# derived trajectory seed: {traj_seed}")
            lines.append(f"# derived noise seed: {noise_seed}")
            lines.append(f"# derived sampling seed: {sampling_seed}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
