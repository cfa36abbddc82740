"""Nested Cartesian coarse/fine grids, skeleton edges, neighborhoods and
oversampled regions.

The coarse grid splits the domain into N_x x N_y (x N_z) rectangular blocks;
every block is refined into n^d equal fine cells, so the fine grid is
conforming across block interfaces by construction.  Fine faces are numbered
per normal axis (x-normal faces first, then y, then z), x-fastest within each
axis.  A "coarse edge" is a block interface (a face in 3D); the mortar
skeleton consists of the interior coarse edges only, since no-flow outer
boundaries carry no multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridError(ValueError):
    """Invalid grid construction parameters or queries."""


@dataclass(frozen=True)
class CoarseEdge:
    """One coarse block interface and the fine faces composing it.

    ``blocks`` holds the flat ids of the adjacent blocks, lower side first
    (outward normal +axis); a boundary edge has a single adjacent block.
    """

    index: int
    axis: int
    plane: int                 # coarse index along `axis` (0..N_axis)
    transverse: tuple          # coarse block coords in the other axes
    blocks: tuple              # (lower, upper) flat block ids; 1-tuple on the boundary
    faces: np.ndarray          # global fine-face ids, ordered x-fastest
    is_boundary: bool = False

    @property
    def n_faces(self):
        return self.faces.size

    def outward_sign(self, block):
        """+1 if +axis points out of `block` through this edge, else -1."""
        if block == self.blocks[0] and not (self.is_boundary and self.plane == 0):
            return 1
        return -1


@dataclass(frozen=True)
class Region:
    """Axis-aligned box of fine cells, e.g. a neighborhood or an oversampled
    local domain.  `lo`/`hi` are half-open fine-cell index bounds per axis."""

    grid: "GridHierarchy" = field(repr=False)
    lo: tuple
    hi: tuple
    is_oversampled: bool = False

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise GridError(f"empty region box {self.lo}..{self.hi}")

    @property
    def shape(self):
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    def cells(self):
        """Flat ids of all fine cells inside the box."""
        g = self.grid
        axes = [np.arange(l, h) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return g.cell_index(*mesh).ravel()

    def cell_set(self):
        return frozenset(self.cells().tolist())

    def contains(self, other):
        return all(a <= b for a, b in zip(self.lo, other.lo)) and all(
            a >= b for a, b in zip(self.hi, other.hi))

    def interior_faces(self):
        """Global ids of fine faces strictly inside the box (both adjacent
        cells inside)."""
        g = self.grid
        out = []
        for a in range(g.dim):
            axes = []
            for b in range(g.dim):
                if b == a:
                    axes.append(np.arange(self.lo[b] + 1, self.hi[b]))
                else:
                    axes.append(np.arange(self.lo[b], self.hi[b]))
            if any(ax.size == 0 for ax in axes):
                continue
            mesh = np.meshgrid(*axes, indexing="ij")
            out.append(g.face_index(a, *mesh).ravel())
        if not out:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(out)

    def covered_edges(self):
        """Coarse edges whose fine faces all lie strictly inside the box."""
        inside = frozenset(self.interior_faces().tolist())
        return [e for e in self.grid.skeleton
                if all(f in inside for f in e.faces.tolist())]


class GridHierarchy:
    """Nested coarse/fine tensor grids with cell, face and block index maps."""

    def __init__(self, extents, n_blocks, n_fine):
        extents = tuple(float(e) for e in extents)
        n_blocks = tuple(int(n) for n in n_blocks)
        if len(extents) != len(n_blocks):
            raise GridError("extents and coarse counts must have equal length")
        self.dim = len(extents)
        if self.dim not in (2, 3):
            raise GridError(f"dimension must be 2 or 3, got {self.dim}")
        if any(e <= 0 for e in extents):
            raise GridError(f"non-positive extents {extents}")
        if any(nb < 2 for nb in n_blocks):
            raise GridError(f"need at least 2 coarse blocks per axis, got {n_blocks}")
        if int(n_fine) < 2:
            raise GridError(f"need at least 2 fine cells per block axis, got {n_fine}")

        self.extents = extents
        self.n_blocks = n_blocks
        self.n_fine = int(n_fine)
        self.fine_counts = tuple(nb * self.n_fine for nb in n_blocks)
        self.h = tuple(L / m for L, m in zip(extents, self.fine_counts))
        self.H = tuple(L / nb for L, nb in zip(extents, n_blocks))
        self.n_cells = int(np.prod(self.fine_counts))
        self.total_blocks = int(np.prod(n_blocks))
        self.cell_volume = float(np.prod(self.h))
        # face area per normal axis
        self.face_area = tuple(self.cell_volume / ha for ha in self.h)

        # face numbering: per-axis contiguous ranges
        self._face_shapes = []
        self._face_offsets = []
        off = 0
        for a in range(self.dim):
            shape = tuple(m + 1 if b == a else m
                          for b, m in enumerate(self.fine_counts))
            self._face_shapes.append(shape)
            self._face_offsets.append(off)
            off += int(np.prod(shape))
        self.n_faces = off

        self._build_block_maps()
        self._build_edges()

    # ------------------------------------------------------------------ index maps

    def cell_index(self, *coords):
        """Flat cell id from per-axis fine indices (scalars or arrays)."""
        return np.ravel_multi_index(coords, self.fine_counts, order="F")

    def cell_coords(self, cells):
        return np.unravel_index(cells, self.fine_counts, order="F")

    def face_index(self, axis, *coords):
        """Flat face id from the axis-`axis` face grid indices."""
        return self._face_offsets[axis] + np.ravel_multi_index(
            coords, self._face_shapes[axis], order="F")

    def face_axis(self, faces):
        faces = np.asarray(faces)
        axis = np.zeros(faces.shape, dtype=np.int64)
        for a in range(1, self.dim):
            axis[faces >= self._face_offsets[a]] = a
        return axis

    def face_coords(self, axis, faces):
        return np.unravel_index(np.asarray(faces) - self._face_offsets[axis],
                                self._face_shapes[axis], order="F")

    def face_cells(self, axis, faces):
        """(lower, upper) flat cell ids across the face; -1 outside the domain."""
        coords = list(self.face_coords(axis, faces))
        i = coords[axis]
        lower = np.where(i > 0,
                         self._cell_from_shifted(coords, axis, -1), -1)
        upper = np.where(i < self.fine_counts[axis],
                         self._cell_from_shifted(coords, axis, 0), -1)
        return lower, upper

    def _cell_from_shifted(self, coords, axis, shift):
        c = [np.asarray(x) for x in coords]
        c[axis] = np.clip(c[axis] + shift, 0, self.fine_counts[axis] - 1)
        return self.cell_index(*c)

    def cell_centers(self):
        """(n_cells, dim) array of fine-cell center coordinates."""
        coords = self.cell_coords(np.arange(self.n_cells))
        return np.stack([(np.asarray(ci) + 0.5) * hi
                         for ci, hi in zip(coords, self.h)], axis=1)

    # ------------------------------------------------------------------ blocks

    def _build_block_maps(self):
        coords = self.cell_coords(np.arange(self.n_cells))
        bcoords = tuple(np.asarray(c) // self.n_fine for c in coords)
        self.block_of_cell = np.ravel_multi_index(bcoords, self.n_blocks, order="F")
        order = np.argsort(self.block_of_cell, kind="stable")
        self._block_cells = np.split(
            order, np.cumsum(np.bincount(self.block_of_cell,
                                         minlength=self.total_blocks))[:-1])

    def block_coords(self, block):
        return np.unravel_index(block, self.n_blocks, order="F")

    def block_index(self, *coords):
        return int(np.ravel_multi_index(coords, self.n_blocks, order="F"))

    def block_cells(self, block):
        """Flat ids of the fine cells of one coarse block."""
        return self._block_cells[block]

    def block_box(self, block):
        bc = self.block_coords(block)
        lo = tuple(int(c) * self.n_fine for c in bc)
        hi = tuple(l + self.n_fine for l in lo)
        return lo, hi

    # ------------------------------------------------------------------ coarse edges

    def _build_edges(self):
        interior, boundary = [], []
        for a in range(self.dim):
            trans_axes = [b for b in range(self.dim) if b != a]
            trans_ranges = [range(self.n_blocks[b]) for b in trans_axes]
            for plane in range(self.n_blocks[a] + 1):
                for tv in np.ndindex(*[len(r) for r in trans_ranges]):
                    bcoord = [0] * self.dim
                    for b, t in zip(trans_axes, tv):
                        bcoord[b] = t
                    faces = self._edge_faces(a, plane, bcoord, trans_axes)
                    if 0 < plane < self.n_blocks[a]:
                        lo = list(bcoord); lo[a] = plane - 1
                        hi = list(bcoord); hi[a] = plane
                        blocks = (self.block_index(*lo), self.block_index(*hi))
                        interior.append((a, plane, tuple(tv), blocks, faces, False))
                    else:
                        bc = list(bcoord)
                        bc[a] = 0 if plane == 0 else self.n_blocks[a] - 1
                        blocks = (self.block_index(*bc),)
                        boundary.append((a, plane, tuple(tv), blocks, faces, True))
        self.skeleton = [CoarseEdge(i, *args) for i, args in enumerate(interior)]
        nsk = len(self.skeleton)
        self.boundary_edges = [CoarseEdge(nsk + i, *args)
                               for i, args in enumerate(boundary)]

    def _edge_faces(self, axis, plane, bcoord, trans_axes):
        n = self.n_fine
        coords = []
        for b in range(self.dim):
            if b == axis:
                coords.append(np.array([plane * n]))
            else:
                start = bcoord[b] * n
                coords.append(np.arange(start, start + n))
        mesh = np.meshgrid(*coords, indexing="ij")
        faces = self.face_index(axis, *mesh)
        return np.sort(faces.ravel())

    def edge(self, index):
        if index < len(self.skeleton):
            return self.skeleton[index]
        return self.boundary_edges[index - len(self.skeleton)]

    @property
    def n_skeleton_edges(self):
        return len(self.skeleton)

    def block_skeleton_edges(self, block):
        """Interior coarse edges on the boundary of one block."""
        return [e for e in self.skeleton if block in e.blocks]

    def boundary_faces_mask(self):
        """Boolean mask over all faces marking the outer domain boundary."""
        mask = np.zeros(self.n_faces, dtype=bool)
        for a in range(self.dim):
            for plane in (0, self.fine_counts[a]):
                coords = [np.arange(m) for m in self._face_shapes[a]]
                coords[a] = np.array([plane])
                mesh = np.meshgrid(*coords, indexing="ij")
                mask[self.face_index(a, *mesh).ravel()] = True
        return mask


def build_grids(extents, n_blocks, n_fine):
    """Construct the nested coarse/fine grid hierarchy.

    Parameters mirror the experiment setups: physical `extents` per axis,
    coarse block counts `n_blocks` per axis, and a uniform per-block fine
    count `n_fine`.
    """
    return GridHierarchy(extents, n_blocks, n_fine)


def neighborhood(grid, edge):
    """Union of the two coarse blocks adjacent to an interior edge."""
    if edge.is_boundary:
        raise GridError(f"edge {edge.index} lies on the outer boundary")
    lo0, hi0 = grid.block_box(edge.blocks[0])
    lo1, hi1 = grid.block_box(edge.blocks[1])
    lo = tuple(min(a, b) for a, b in zip(lo0, lo1))
    hi = tuple(max(a, b) for a, b in zip(hi0, hi1))
    return Region(grid, lo, hi, is_oversampled=False)


def oversample_region(grid, edge, d11, d12, d21=None, d22=None):
    """Oversampled box around an interior edge, in fine-cell units.

    For a vertical (x-normal) edge the box spans `d11` cells on each side
    perpendicular to the edge and extends the edge span by `d12` cells beyond
    each endpoint; a horizontal (y-normal) edge uses (`d22`, `d21`).  The box
    is clipped at the domain boundary.
    """
    if grid.dim != 2:
        raise GridError("explicit d-matrix oversampling is 2D only; "
                        "use region_for_case for 3D")
    if edge.is_boundary:
        raise GridError(f"edge {edge.index} lies on the outer boundary")
    if d21 is None or d22 is None:
        raise GridError("all four d-values are required")
    d = np.array([[d11, d12], [d21, d22]], dtype=np.int64)
    if (d < 0).any():
        raise GridError(f"negative oversampling widths {d.tolist()}")
    a = edge.axis
    perp, ext = int(d[a, a]), int(d[a, 1 - a])
    return _oversample_box(grid, edge, perp, ext)


def _oversample_box(grid, edge, perp, ext):
    n = grid.n_fine
    a = edge.axis
    plane_fine = edge.plane * n
    lo = [0] * grid.dim
    hi = [0] * grid.dim
    lo[a] = plane_fine - perp
    hi[a] = plane_fine + perp
    tcoord = list(edge.transverse)
    for b, t in zip([b for b in range(grid.dim) if b != a], tcoord):
        lo[b] = t * n - ext
        hi[b] = (t + 1) * n + ext
    lo = [max(0, v) for v in lo]
    hi = [min(m, v) for v, m in zip(hi, grid.fine_counts)]
    if any(h <= l for l, h in zip(lo, hi)):
        raise GridError("oversampled box is empty after clipping")
    return Region(grid, tuple(lo), tuple(hi), is_oversampled=True)


#: named oversampling cases; "1" is the plain two-block neighborhood
OVERSAMPLING_CASES = ("1", "a", "b")


def region_for_case(grid, edge, case):
    """Local problem domain for the named oversampling case.

    Case "1": the plain neighborhood.  Case "a": one extra fine layer in the
    edge direction(s).  Case "b": perpendicular span halved, one extra layer
    in the edge direction(s).
    """
    n = grid.n_fine
    if case == "1":
        return _oversample_box(grid, edge, n, 0)
    if case == "a":
        return _oversample_box(grid, edge, n, 1)
    if case == "b":
        return _oversample_box(grid, edge, n // 2, 1)
    raise GridError(f"unknown oversampling case {case!r}")


def color_classes(grid):
    """Partition the skeleton into groups of edges with pairwise disjoint
    neighborhoods.

    Same-normal edges on even/odd coarse planes can never share a block, so
    2*dim groups suffice on tensor grids (four in 2D: vertical-even,
    vertical-odd, horizontal-even, horizontal-odd).  Empty groups are
    dropped.
    """
    groups = {}
    for e in grid.skeleton:
        groups.setdefault((e.axis, e.plane % 2), []).append(e.index)
    return [groups[k] for k in sorted(groups)]


def touching_blocks(grid, edge):
    """Blocks whose boundary shares skeleton faces with the boundary of the
    edge's neighborhood; used to decide when two local problems interact."""
    blocks = set()
    for b in edge.blocks:
        for e in grid.block_skeleton_edges(b):
            blocks.update(e.blocks)
    return frozenset(blocks)


def separated_edges(grid):
    """Greedy maximal set of edges whose local problems are mutually
    non-interacting (their supports never meet through a common block)."""
    taken = set()
    chosen = []
    for e in grid.skeleton:
        touch = touching_blocks(grid, e)
        if taken.isdisjoint(touch):
            chosen.append(e.index)
            taken.update(touch)
    return chosen
