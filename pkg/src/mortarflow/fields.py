"""Fine-grid permeability/porosity fields: synthetic channelized generators
and raw-array file I/O.

Field files are either ASCII (header line ``nx ny nz`` followed by
whitespace-separated values) or raw little-endian float64, both in x-fastest
cell order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GridHierarchy

DEFAULT_POROSITY = 0.2


class FieldFormatError(ValueError):
    """Malformed or out-of-range field data; carries the offending index."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class PermField:
    """Cell-wise scalar permeability and porosity on the fine grid."""

    kappa: np.ndarray
    porosity: np.ndarray
    dims: tuple

    def __post_init__(self):
        n = int(np.prod(self.dims))
        if self.kappa.shape != (n,):
            raise FieldFormatError(
                f"permeability length {self.kappa.shape} does not match dims {self.dims}")
        if self.porosity.shape != (n,):
            raise FieldFormatError(
                f"porosity length {self.porosity.shape} does not match dims {self.dims}")
        _validate_positive(self.kappa, "permeability")
        bad = np.flatnonzero(~((self.porosity > 0) & (self.porosity <= 1)))
        if bad.size:
            i = int(bad[0])
            raise FieldFormatError(
                f"porosity out of (0, 1] at cell {i}: {self.porosity[i]}", index=i)

    @property
    def n_cells(self):
        return int(np.prod(self.dims))


def _validate_positive(values, what):
    bad = np.flatnonzero(~(np.isfinite(values) & (values > 0)))
    if bad.size:
        i = int(bad[0])
        raise FieldFormatError(
            f"{what} must be positive and finite; cell {i} has {values[i]}", index=i)


def uniform_field(grid, kappa=1.0, porosity=DEFAULT_POROSITY):
    n = grid.n_cells
    return PermField(np.full(n, float(kappa)), np.full(n, float(porosity)),
                     grid.fine_counts)


@dataclass(frozen=True)
class ChannelBox:
    """Axis-aligned box of fine cells, half-open index bounds per axis."""

    lo: tuple
    hi: tuple


def boxes_from_polyline(cells, width=1):
    """Turn a polyline of fine-cell waypoints into a list of one-cell-wide
    (padded by `width`) axis-aligned boxes covering the staircase path."""
    boxes = []
    for (x0, y0), (x1, y1) in zip(cells[:-1], cells[1:]):
        lo = (min(x0, x1), min(y0, y1))
        hi = (max(x0, x1) + width, max(y0, y1) + width)
        boxes.append(ChannelBox(lo, hi))
    return boxes


def generate_channel_field(grid, boxes, background=1.0, contrast=1.0,
                           porosity=DEFAULT_POROSITY):
    """Background-valued field with `contrast`-valued cells inside the boxes.

    Deterministic for a fixed box list; boxes must lie inside the fine grid.
    """
    if contrast <= 0:
        raise FieldFormatError(f"contrast must be positive, got {contrast}")
    kappa = np.full(grid.n_cells, float(background))
    for b in boxes:
        if len(b.lo) != grid.dim:
            raise FieldFormatError(f"box {b} has wrong dimension")
        if any(l < 0 or h > m or l >= h
               for l, h, m in zip(b.lo, b.hi, grid.fine_counts)):
            raise FieldFormatError(f"box {b} outside fine grid {grid.fine_counts}")
        region_axes = [np.arange(l, h) for l, h in zip(b.lo, b.hi)]
        mesh = np.meshgrid(*region_axes, indexing="ij")
        kappa[grid.cell_index(*mesh).ravel()] = float(contrast)
    return PermField(kappa, np.full(grid.n_cells, float(porosity)),
                     grid.fine_counts)


def model1_like_boxes(grid):
    """Synthetic high-contrast geometry: long channels (one with a vertical
    jog) plus isolated inclusions, given in grid-relative fractions so any
    fine resolution works."""
    relative = [
        # long horizontal channels
        (0.00, 1.00, 0.18, 0.21),
        (0.00, 0.72, 0.56, 0.59),
        (0.38, 1.00, 0.78, 0.81),
        # vertical jog connecting the middle channel upward
        (0.69, 0.72, 0.56, 0.90),
        # isolated inclusions
        (0.10, 0.14, 0.38, 0.42),
        (0.30, 0.34, 0.68, 0.72),
        (0.55, 0.59, 0.33, 0.37),
        (0.80, 0.84, 0.52, 0.56),
        (0.15, 0.19, 0.86, 0.90),
        (0.86, 0.90, 0.08, 0.12),
    ]
    mx, my = grid.fine_counts[0], grid.fine_counts[1]
    boxes = []
    for x0, x1, y0, y1 in relative:
        lo = (int(round(x0 * mx)), int(round(y0 * my)))
        hi = (max(lo[0] + 1, int(round(x1 * mx))),
              max(lo[1] + 1, int(round(y1 * my))))
        if grid.dim == 3:
            lo = lo + (0,)
            hi = hi + (grid.fine_counts[2],)
        boxes.append(ChannelBox(lo, hi))
    return boxes


def model1_like_field(grid, contrast=1e4, porosity=DEFAULT_POROSITY):
    return generate_channel_field(grid, model1_like_boxes(grid),
                                  background=1.0, contrast=contrast,
                                  porosity=porosity)


def log_uniform_field(grid, lo=1.0, hi=1e4, seed=0, porosity=DEFAULT_POROSITY):
    """Random cell-wise field with log10(kappa) uniform in [log lo, log hi]."""
    rng = np.random.default_rng(seed)
    kappa = 10.0 ** rng.uniform(np.log10(lo), np.log10(hi), grid.n_cells)
    return PermField(kappa, np.full(grid.n_cells, float(porosity)),
                     grid.fine_counts)


# ---------------------------------------------------------------------- file I/O

def save_field(field, path, layout="ascii"):
    """Write permeability values; ASCII mode carries an ``nx ny nz`` header."""
    dims3 = tuple(field.dims) + (1,) * (3 - len(field.dims))
    if layout == "ascii":
        with open(path, "w") as fh:
            fh.write("%d %d %d\n" % dims3)
            for v in field.kappa:
                fh.write("%.17g\n" % v)
    elif layout == "binary":
        field.kappa.astype("<f8").tofile(path)
    else:
        raise FieldFormatError(f"unknown layout {layout!r}")


def load_raw_field(path, dims=None, layout="ascii", layers=None,
                   porosity=DEFAULT_POROSITY):
    """Load a permeability field from disk.

    ASCII files declare their dims in the header (`dims`, when given, must
    agree); binary files require `dims`.  `layers=(lo, hi)` slices a
    contiguous z-range out of a 3D array.  Values are validated to be finite
    and positive; violations report the offending cell index.
    """
    if layout == "ascii":
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) != 3:
                raise FieldFormatError(f"bad header {header!r} in {path}")
            file_dims = tuple(int(x) for x in header)
            values = np.loadtxt(fh, dtype=float).ravel()
        declared = _squeeze_dims(file_dims)
        if dims is not None and tuple(dims) != declared:
            raise FieldFormatError(
                f"declared dims {declared} do not match requested {tuple(dims)}")
        dims = declared
    elif layout == "binary":
        if dims is None:
            raise FieldFormatError("binary layout requires explicit dims")
        dims = tuple(int(d) for d in dims)
        values = np.fromfile(path, dtype="<f8")
    else:
        raise FieldFormatError(f"unknown layout {layout!r}")

    expected = int(np.prod(dims))
    if values.size != expected:
        raise FieldFormatError(
            f"{path} holds {values.size} values, dims {dims} need {expected}")
    if layers is not None:
        if len(dims) != 3:
            raise FieldFormatError("layer slicing needs a 3D field")
        z0, z1 = layers
        if not (0 <= z0 < z1 <= dims[2]):
            raise FieldFormatError(f"layer range {layers} outside 0..{dims[2]}")
        cube = values.reshape(dims, order="F")[:, :, z0:z1]
        dims = (dims[0], dims[1], z1 - z0)
        values = cube.ravel(order="F")
        if dims[2] == 1:
            dims = dims[:2]
            values = values.copy()
    _validate_positive(values, "permeability")
    return PermField(values, np.full(values.size, float(porosity)), tuple(dims))


def _squeeze_dims(dims3):
    if dims3[2] == 1:
        return dims3[:2]
    return dims3


def field_for_grid(field, grid):
    """Check that a loaded field matches a grid's fine dimensions."""
    if tuple(field.dims) != tuple(grid.fine_counts):
        raise FieldFormatError(
            f"field dims {field.dims} do not match fine grid {grid.fine_counts}")
    return field
