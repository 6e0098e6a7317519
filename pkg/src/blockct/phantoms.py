"""Test objects, volume file I/O, and measurement simulation.

The built-in head phantom is the usual piecewise-constant ellipse stack
(unit-range variant, values in [0, 1]) defined on the unit square / cube
and stretched to the grid's physical extent; the 2D kind uses the planar
table, the 3D kind the ellipsoid table.

Volumes travel as raw little-endian C-order arrays next to a small text
sidecar (``<file>.hdr``) recording dims, voxel size, origin, dtype, and
order, so a dump can be reloaded without out-of-band knowledge.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .projector import forward_project
from .validation import check_choice, check_nonnegative

PHANTOM_KINDS = ("shepp_logan_2d", "shepp_logan_3d", "file")

# value, a, b, x0, y0, phi (degrees); unit-square coordinates
_ELLIPSES_2D = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)

# value, a, b, c, x0, y0, z0, phi (degrees about z); unit-cube coordinates
_ELLIPSOIDS_3D = (
    (1.0, 0.69, 0.92, 0.81, 0.0, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.78, 0.0, -0.0184, 0.0, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.22, 0.0, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, 0.28, -0.22, 0.0, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.41, 0.0, 0.35, -0.15, 0.0),
    (0.1, 0.0460, 0.0460, 0.05, 0.0, 0.1, 0.25, 0.0),
    (0.1, 0.0460, 0.0460, 0.05, 0.0, -0.1, 0.25, 0.0),
    (0.1, 0.0460, 0.0230, 0.05, -0.08, -0.605, 0.0, 0.0),
    (0.1, 0.0230, 0.0230, 0.02, 0.0, -0.606, 0.0, 0.0),
    (0.1, 0.0230, 0.0460, 0.02, 0.06, -0.605, 0.0, 0.0),
)


def _normalized_centers(grid):
    """Voxel centers mapped to [-1, 1] per axis of the grid's extent."""
    axes = []
    for a in range(3):
        c = grid.voxel_centers_axis(a)
        half = grid.dims[a] * grid.voxel_size[a] / 2.0
        mid = grid.origin[a] + half
        axes.append((c - mid) / half)
    return np.meshgrid(*axes, indexing="ij")


def head_phantom(grid):
    """Evaluate the built-in head phantom on a grid; returns a flat volume
    in the grid's C order."""
    u, v, w = _normalized_centers(grid)
    vol = np.zeros(grid.dims)
    if grid.dims[2] == 1:
        for val, a, b, x0, y0, phi in _ELLIPSES_2D:
            ang = np.deg2rad(phi)
            cu = u - x0
            cv = v - y0
            xr = np.cos(ang) * cu + np.sin(ang) * cv
            yr = -np.sin(ang) * cu + np.cos(ang) * cv
            vol[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    else:
        for val, a, b, c, x0, y0, z0, phi in _ELLIPSOIDS_3D:
            ang = np.deg2rad(phi)
            cu = u - x0
            cv = v - y0
            cw = w - z0
            xr = np.cos(ang) * cu + np.sin(ang) * cv
            yr = -np.sin(ang) * cu + np.cos(ang) * cv
            vol[(xr / a) ** 2 + (yr / b) ** 2 + (cw / c) ** 2 <= 1.0] += val
    return vol.ravel()


def make_phantom(kind, grid, path=None):
    """Build a reference volume: the built-in head phantom (2D or 3D kind,
    which must match the grid) or a file load matching the grid's dims."""
    check_choice("phantom kind", kind, PHANTOM_KINDS)
    if kind in ("shepp_logan_2d", "shepp_logan_3d"):
        planar = grid.dims[2] == 1
        if planar != (kind == "shepp_logan_2d"):
            raise ConfigurationError(
                f"phantom kind {kind!r} does not match grid dims {grid.dims}")
        return head_phantom(grid)
    if path is None:
        raise ConfigurationError("phantom kind 'file' requires a path")
    vol, header = load_volume(path)
    if tuple(header["dims"]) != grid.dims:
        raise ConfigurationError(
            f"phantom file dims {header['dims']} do not match grid {grid.dims}")
    return vol.astype(np.float64).ravel()


def save_volume(path, volume, grid, dtype="float64"):
    """Write a volume as raw little-endian C-order values plus a text
    sidecar header at ``<path>.hdr``."""
    if dtype not in ("float32", "float64"):
        raise ConfigurationError(f"unsupported dtype {dtype!r}")
    arr = np.asarray(volume, dtype=np.float64).ravel()
    if arr.size != grid.n_voxels:
        raise ConfigurationError(
            f"volume has {arr.size} values, grid has {grid.n_voxels} voxels")
    arr.astype("<" + ("f4" if dtype == "float32" else "f8")).tofile(path)
    with open(str(path) + ".hdr", "w", encoding="ascii") as fh:
        fh.write("dims: %d %d %d\n" % grid.dims)
        fh.write("voxel_size: %.17g %.17g %.17g\n" % grid.voxel_size)
        fh.write("origin: %.17g %.17g %.17g\n" % grid.origin)
        fh.write(f"dtype: {dtype}\n")
        fh.write("order: C\n")


def load_volume(path):
    """Read a raw volume written by save_volume; returns (flat float64
    array, header dict).  The header sidecar is required and the file size
    must match it."""
    hdr_path = str(path) + ".hdr"
    header = {}
    try:
        with open(hdr_path, "r", encoding="ascii") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                key, _, rest = line.partition(":")
                header[key.strip()] = rest.strip()
    except FileNotFoundError as exc:
        raise ConfigurationError(f"missing volume header {hdr_path}") from exc
    for key in ("dims", "voxel_size", "origin", "dtype", "order"):
        if key not in header:
            raise ConfigurationError(f"volume header lacks {key!r}")
    dims = tuple(int(t) for t in header["dims"].split())
    header["dims"] = dims
    header["voxel_size"] = tuple(float(t) for t in header["voxel_size"].split())
    header["origin"] = tuple(float(t) for t in header["origin"].split())
    if header["order"] != "C":
        raise ConfigurationError(f"unsupported order {header['order']!r}")
    if header["dtype"] not in ("float32", "float64"):
        raise ConfigurationError(f"unsupported dtype {header['dtype']!r}")
    np_dtype = "<f4" if header["dtype"] == "float32" else "<f8"
    raw = np.fromfile(path, dtype=np_dtype)
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise ConfigurationError(
            f"volume {path} holds {raw.size} values, header says {expected}")
    return raw.astype(np.float64), header


def simulate_projections(volume, geometry, noise="none", sigma=0.0, seed=None):
    """Forward project a volume into measurements, optionally with additive
    white Gaussian noise of absolute standard deviation sigma (sigma = 0 is
    allowed and equals the noiseless path)."""
    check_choice("noise", noise, ("none", "gaussian"))
    y = forward_project(geometry, volume)
    if noise == "gaussian":
        check_nonnegative("sigma", sigma)
        rng = np.random.default_rng(seed)
        y = y + rng.normal(0.0, sigma, size=y.size)
    return y
