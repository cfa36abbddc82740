"""Lowest-order mixed finite-element kernels on rectangular cells.

Velocity lives in the lowest-order face space with the trapezoidal quadrature
on the weighted velocity mass term, so the per-cell mass matrix is diagonal
and each cell condenses exactly onto its face pressure multipliers.  In flux
variables the cell contribution through a face is ``q = t (p - lam)`` with the
half-transmissibility ``t = 2 c V / h^2``; eliminating interior multipliers
reproduces cell-centered finite differences with harmonic face averaging, and
eliminating cell pressures gives the symmetric positive semidefinite hybrid
operator used for oversampling and smoothing.

All flux arrays are indexed by global face id and signed along the +axis
direction; outer-boundary faces carry zero flux (no-flow).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import PermField
from .geometry import Region


class SolverError(RuntimeError):
    """Linear solve or factorization failure, with originating context."""


def coeff_array(perm_or_coeff):
    if isinstance(perm_or_coeff, PermField):
        return perm_or_coeff.kappa
    return np.asarray(perm_or_coeff, dtype=float)


def half_transmissibilities(grid, coeff):
    """Per-axis arrays of the cell half-transmissibility 2 c V / h_a^2."""
    c = coeff_array(coeff)
    return [2.0 * c * grid.cell_volume / grid.h[a] ** 2 for a in range(grid.dim)]


def cell_face_tables(grid, cells=None):
    """Face ids of each cell, column order (x-lo, x-hi, y-lo, y-hi[, ...]),
    plus a mask of faces interior to the domain (no-flow faces excluded)."""
    if cells is None:
        cells = np.arange(grid.n_cells)
    coords = [np.asarray(c) for c in grid.cell_coords(cells)]
    faces = np.empty((cells.size, 2 * grid.dim), dtype=np.int64)
    present = np.empty_like(faces, dtype=bool)
    for a in range(grid.dim):
        hi = [c.copy() for c in coords]
        hi[a] = hi[a] + 1
        faces[:, 2 * a] = grid.face_index(a, *coords)
        faces[:, 2 * a + 1] = grid.face_index(a, *hi)
        present[:, 2 * a] = coords[a] > 0
        present[:, 2 * a + 1] = coords[a] < grid.fine_counts[a] - 1
    return faces, present


def cell_t_matrix(grid, coeff, cells=None):
    """Half-transmissibility per (cell, local face), aligned with
    cell_face_tables columns."""
    if cells is None:
        cells = np.arange(grid.n_cells)
    th = half_transmissibilities(grid, coeff)
    t = np.empty((cells.size, 2 * grid.dim))
    for a in range(grid.dim):
        t[:, 2 * a] = th[a][cells]
        t[:, 2 * a + 1] = th[a][cells]
    return t


def _axis_interior_faces(grid, axis):
    coords = [np.arange(m) for m in grid._face_shapes[axis]]
    coords[axis] = np.arange(1, grid.fine_counts[axis])
    mesh = np.meshgrid(*coords, indexing="ij")
    faces = grid.face_index(axis, *mesh).ravel()
    lower, upper = grid.face_cells(axis, faces)
    return lower, upper, faces


def face_transmissibilities(grid, coeff):
    """Harmonic two-sided transmissibility per interior face; zero on the
    outer boundary."""
    th = half_transmissibilities(grid, coeff)
    T = np.zeros(grid.n_faces)
    for a in range(grid.dim):
        lower, upper, faces = _axis_interior_faces(grid, a)
        T[faces] = 1.0 / (1.0 / th[a][lower] + 1.0 / th[a][upper])
    return T


def _grounded(matrix):
    """Shift the constant kernel: add a positive value at (0, 0)."""
    g = sp.csc_matrix(([max(matrix.diagonal().mean(), 1.0)], ([0], [0])),
                      shape=matrix.shape)
    return (matrix + g).tocsc()


def _factorize(matrix, context):
    try:
        return spla.splu(matrix.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"factorization failed for {context}: {exc}") from exc


def _refine_solve(lu, matrix, rhs, passes=1):
    x = lu.solve(rhs)
    for _ in range(passes):
        x = x + lu.solve(rhs - matrix @ x)
    return x


# --------------------------------------------------------------------- sources

def corner_source(grid, magnitude=4.0):
    """Balanced point sources: +magnitude in the top-left fine cell,
    -magnitude in the bottom-right one."""
    f = np.zeros(grid.n_cells)
    top_left = [0] * grid.dim
    bottom_right = [m - 1 for m in grid.fine_counts]
    for a in range(1, grid.dim):
        top_left[a] = grid.fine_counts[a] - 1
        bottom_right[a] = 0
    f[grid.cell_index(*top_left)] = magnitude
    f[grid.cell_index(*bottom_right)] = -magnitude
    return f


def check_compatible(F, rel=1e-9):
    total = float(np.sum(F))
    scale = float(np.sum(np.abs(F)))
    if scale > 0 and abs(total) > rel * scale:
        raise ValueError(
            f"source incompatible with no-flow boundary: net imbalance {total:g}")
    return total


def divergence_residual(grid, flux, F):
    """Per-cell net outward flux minus the integrated source."""
    res = -np.asarray(F, dtype=float).astype(float).copy()
    faces, present = cell_face_tables(grid)
    for a in range(grid.dim):
        res -= np.where(present[:, 2 * a], flux[faces[:, 2 * a]], 0.0)
        res += np.where(present[:, 2 * a + 1], flux[faces[:, 2 * a + 1]], 0.0)
    return res


def velocity_from_flux(grid, flux):
    """Cell-centered velocity vectors from face fluxes (face averages)."""
    faces, present = cell_face_tables(grid)
    vel = np.zeros((grid.n_cells, grid.dim))
    for a in range(grid.dim):
        qlo = np.where(present[:, 2 * a], flux[faces[:, 2 * a]], 0.0)
        qhi = np.where(present[:, 2 * a + 1], flux[faces[:, 2 * a + 1]], 0.0)
        vel[:, a] = 0.5 * (qlo + qhi) / grid.face_area[a]
    return vel


def skeleton_faces(grid):
    """Concatenated fine-face ids of all interior coarse edges, plus the
    inverse map from face id to skeleton position (-1 off the skeleton)."""
    faces = (np.concatenate([e.faces for e in grid.skeleton])
             if grid.skeleton else np.empty(0, dtype=np.int64))
    pos = np.full(grid.n_faces, -1, dtype=np.int64)
    pos[faces] = np.arange(faces.size)
    return faces, pos


def face_pressures(grid, coeff, p, faces):
    """Hybrid face pressures from cell pressures on given interior faces."""
    th = half_transmissibilities(grid, coeff)
    lam = np.zeros(faces.size)
    axes = grid.face_axis(faces)
    for a in range(grid.dim):
        m = axes == a
        if not m.any():
            continue
        lo, up = grid.face_cells(a, faces[m])
        tl, tu = th[a][lo], th[a][up]
        lam[m] = (tl * p[lo] + tu * p[up]) / (tl + tu)
    return lam


# ------------------------------------------------------------ fine reference solve

class FineSolution:
    """Monolithic fine-scale solution: mean-zero cell pressures, single-valued
    face fluxes and the face pressures on the mortar skeleton."""

    def __init__(self, grid, p, flux, skeleton_values):
        self.grid = grid
        self.p = p
        self.flux = flux
        self.skeleton_values = skeleton_values

    def velocity(self):
        return velocity_from_flux(self.grid, self.flux)


def tpfa_matrix(grid, coeff):
    """Global cell-centered matrix of the condensed fine problem (pure
    no-flow boundary, singular up to constants)."""
    th = half_transmissibilities(grid, coeff)
    rows, cols, vals = [], [], []
    for a in range(grid.dim):
        lower, upper, _ = _axis_interior_faces(grid, a)
        T = 1.0 / (1.0 / th[a][lower] + 1.0 / th[a][upper])
        rows += [lower, upper, lower, upper]
        cols += [lower, upper, upper, lower]
        vals += [T, T, -T, -T]
    n = grid.n_cells
    return sp.coo_matrix((np.concatenate(vals),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n)).tocsc()


def fine_reference_solve(grid, perm, f):
    """Solve the global fine mixed problem with no-flow boundary.

    `f` is the cell-wise source density; it must integrate to zero.  Returns
    mean-zero pressure, conservative single-valued fluxes, and the skeleton
    face pressures (the snapshot mortar solution).
    """
    coeff = coeff_array(perm)
    F = np.asarray(f, dtype=float) * grid.cell_volume
    check_compatible(F)
    A = tpfa_matrix(grid, coeff)
    Ag = _grounded(A)
    lu = _factorize(Ag, "fine reference system")
    p = _refine_solve(lu, Ag, F, passes=2)
    p = p - p.mean()

    th = half_transmissibilities(grid, coeff)
    flux = np.zeros(grid.n_faces)
    for a in range(grid.dim):
        lower, upper, faces = _axis_interior_faces(grid, a)
        T = 1.0 / (1.0 / th[a][lower] + 1.0 / th[a][upper])
        flux[faces] = T * (p[lower] - p[upper])

    sk_faces, _ = skeleton_faces(grid)
    lam = face_pressures(grid, coeff, p, sk_faces)
    return FineSolution(grid, p, flux, lam)


# ------------------------------------------------------------- subdomain systems

class BlockSolution:
    """Solution of one coarse-block problem: local cell pressures, +axis
    signed fluxes on the block's interior faces, and outward fluxes on its
    multiplier (skeleton) faces."""

    def __init__(self, system, p, interior_flux, boundary_flux_out):
        self.system = system
        self.p = p
        self.interior_flux = interior_flux
        self.boundary_flux_out = boundary_flux_out


class SubdomainSystem:
    """Factorized condensed system of one coarse block.

    The same factorization serves the two local solve families (multiplier
    data with zero source, and sources with zero multiplier), and the dense
    Dirichlet-to-Neumann response on the block's skeleton faces is cached for
    interface assembly.
    """

    def __init__(self, grid, coeff, block):
        self.grid = grid
        self.block = block
        self.cells = np.sort(grid.block_cells(block))
        self.coeff = coeff_array(coeff)[self.cells]

        faces, present = cell_face_tables(grid, self.cells)
        tmat = cell_t_matrix(grid, coeff, self.cells)
        lo, hi = grid.block_box(block)
        coords = [np.asarray(c) for c in grid.cell_coords(self.cells)]
        nloc = self.cells.size

        int_lower, int_upper, int_faces, int_T = [], [], [], []
        b_face, b_cell, b_t, b_sign = [], [], [], []
        for a in range(grid.dim):
            ca = coords[a]
            # in-block interior faces, visited from their lower cell
            l_idx = np.flatnonzero(ca < hi[a] - 1)
            shifted = [c[l_idx] for c in coords]
            shifted[a] = shifted[a] + 1
            u_idx = np.searchsorted(self.cells, grid.cell_index(*shifted))
            tl = tmat[l_idx, 2 * a + 1]
            tu = tmat[u_idx, 2 * a]
            int_lower.append(l_idx)
            int_upper.append(u_idx)
            int_faces.append(faces[l_idx, 2 * a + 1])
            int_T.append(1.0 / (1.0 / tl + 1.0 / tu))
            # block-boundary multiplier faces (outer boundary excluded)
            for side, col in ((0, 2 * a), (1, 2 * a + 1)):
                on_plane = ca == (lo[a] if side == 0 else hi[a] - 1)
                idx = np.flatnonzero(on_plane & present[:, col])
                if idx.size:
                    b_face.append(faces[idx, col])
                    b_cell.append(idx)
                    b_t.append(tmat[idx, col])
                    b_sign.append(np.full(idx.size, -1 if side == 0 else 1,
                                          dtype=np.int64))

        self.int_lower = np.concatenate(int_lower)
        self.int_upper = np.concatenate(int_upper)
        self.int_faces = np.concatenate(int_faces)
        self.int_T = np.concatenate(int_T)
        self.int_tl = np.concatenate(
            [tmat[idx, 2 * a + 1] for a, idx in enumerate(int_lower)])
        self.int_tu = np.concatenate(
            [tmat[idx, 2 * a] for a, idx in enumerate(int_upper)])

        bf = np.concatenate(b_face) if b_face else np.empty(0, np.int64)
        order = np.argsort(bf, kind="stable")
        self.bface_ids = bf[order]
        self.bface_cell = (np.concatenate(b_cell)[order]
                           if b_face else np.empty(0, np.int64))
        self.bface_t = np.concatenate(b_t)[order] if b_face else np.empty(0)
        self.bface_sign = (np.concatenate(b_sign)[order]
                           if b_face else np.empty(0, np.int64))

        rows = np.concatenate([self.int_lower, self.int_upper,
                               self.int_lower, self.int_upper, self.bface_cell])
        cols = np.concatenate([self.int_lower, self.int_upper,
                               self.int_upper, self.int_lower, self.bface_cell])
        vals = np.concatenate([self.int_T, self.int_T,
                               -self.int_T, -self.int_T, self.bface_t])
        self.matrix = sp.coo_matrix((vals, (rows, cols)),
                                    shape=(nloc, nloc)).tocsc()
        try:
            self.lu = spla.splu(self.matrix)
        except RuntimeError as exc:
            raise SolverError(
                f"block {block}: Dirichlet factorization failed: {exc}") from exc
        self._dtn = None
        self._neumann = None

    @property
    def n_boundary_faces(self):
        return self.bface_ids.size

    # -- solves ----------------------------------------------------------

    def solve(self, lam=None, F=None):
        """Combined local solve: multiplier data `lam` on the block's
        skeleton faces and integrated sources `F` per local cell."""
        rhs = np.zeros(self.cells.size)
        if F is not None:
            rhs = rhs + np.asarray(F, dtype=float)
        if lam is not None:
            lam = np.asarray(lam, dtype=float)
            if lam.shape != (self.bface_ids.size,):
                raise ValueError(
                    f"block {self.block}: multiplier data length {lam.shape} "
                    f"!= boundary faces {self.bface_ids.size}")
            rhs = rhs + np.bincount(self.bface_cell,
                                    weights=self.bface_t * lam,
                                    minlength=self.cells.size)
        p = _refine_solve(self.lu, self.matrix, rhs)
        q_int = self.int_T * (p[self.int_lower] - p[self.int_upper])
        lam0 = 0.0 if lam is None else lam
        q_out = self.bface_t * (p[self.bface_cell] - lam0)
        return BlockSolution(self, p, q_int, q_out)

    def dtn(self):
        """Dense flux-response (Dirichlet-to-Neumann) matrix on the block's
        skeleton faces; symmetric positive semidefinite with constant kernel."""
        if self._dtn is None:
            nb = self.bface_ids.size
            W = np.zeros((self.cells.size, nb))
            W[self.bface_cell, np.arange(nb)] = self.bface_t
            X = self.lu.solve(W) if nb else np.zeros((self.cells.size, 0))
            S = np.diag(self.bface_t) - W.T @ X
            self._dtn = 0.5 * (S + S.T)
        return self._dtn

    def load_vector(self, F):
        """Interface load entries from a zero-multiplier source solve."""
        p = _refine_solve(self.lu, self.matrix, np.asarray(F, dtype=float))
        return self.bface_t * p[self.bface_cell]

    def neumann_solve(self, boundary_flux_out, F):
        """Block solve with prescribed outward boundary fluxes (grounded;
        the data must be compatible).  Returns local p and interior fluxes."""
        if self._neumann is None:
            nloc = self.cells.size
            rows = np.concatenate([self.int_lower, self.int_upper,
                                   self.int_lower, self.int_upper])
            cols = np.concatenate([self.int_lower, self.int_upper,
                                   self.int_upper, self.int_lower])
            vals = np.concatenate([self.int_T, self.int_T,
                                   -self.int_T, -self.int_T])
            A = sp.coo_matrix((vals, (rows, cols)), shape=(nloc, nloc)).tocsc()
            Ag = _grounded(A)
            self._neumann = (_factorize(Ag, f"block {self.block} Neumann"), Ag)
        lu, Ag = self._neumann
        rhs = np.asarray(F, dtype=float) - np.bincount(
            self.bface_cell, weights=boundary_flux_out,
            minlength=self.cells.size)
        p = _refine_solve(lu, Ag, rhs)
        q_int = self.int_T * (p[self.int_lower] - p[self.int_upper])
        return p, q_int

    def boundary_positions(self, faces):
        """Positions of global face ids within the block's boundary list."""
        pos = np.searchsorted(self.bface_ids, faces)
        ok = (pos < self.bface_ids.size)
        if not ok.all() or (self.bface_ids[pos[ok]] != np.asarray(faces)[ok]).any():
            raise ValueError(f"faces not on boundary of block {self.block}")
        return pos

    # -- verification views ------------------------------------------------

    def _mixed_face_list(self):
        inv_t = {}
        for i, T in zip(self.int_faces, self.int_T):
            inv_t[int(i)] = 1.0 / T
        for i, t in zip(self.bface_ids, self.bface_t):
            inv_t[int(i)] = 1.0 / t
        faces = np.array(sorted(inv_t), dtype=np.int64)
        return faces, np.array([inv_t[int(f)] for f in faces])

    def velocity_mass_diagonal(self):
        """Diagonal of the weighted velocity mass matrix in flux variables
        over the block's faces (outer-boundary faces excluded)."""
        return self._mixed_face_list()

    def mixed_matrix(self):
        """Saddle matrix [[M, -B^T], [B, 0]] over the block's flux and
        pressure unknowns (verification view; solves use the condensed
        factorization)."""
        faces, m = self._mixed_face_list()
        pos = {int(f): i for i, f in enumerate(faces)}
        nf, nc = faces.size, self.cells.size
        rows, cols, vals = [], [], []
        for lo_c, up_c, fid in zip(self.int_lower, self.int_upper, self.int_faces):
            j = pos[int(fid)]
            rows += [lo_c, up_c]
            cols += [j, j]
            vals += [1.0, -1.0]
        for i in range(self.bface_ids.size):
            rows.append(int(self.bface_cell[i]))
            cols.append(pos[int(self.bface_ids[i])])
            vals.append(float(self.bface_sign[i]))
        B = sp.coo_matrix((vals, (rows, cols)), shape=(nc, nf)).tocsr()
        M = sp.diags(m)
        Z = sp.coo_matrix((nc, nc))
        return sp.bmat([[M, -B.T], [B, Z]]).tocsr(), faces

    def boundary_coupling(self):
        """Sparse map from boundary multiplier values to momentum-equation
        load entries of the mixed system."""
        faces, _ = self._mixed_face_list()
        pos = {int(f): i for i, f in enumerate(faces)}
        rows = [pos[int(f)] for f in self.bface_ids]
        cols = np.arange(self.bface_ids.size)
        return sp.coo_matrix((self.bface_sign.astype(float), (rows, cols)),
                             shape=(faces.size, self.bface_ids.size)).tocsr()


def assemble_subdomain(grid, perm, block):
    """Build and factorize the condensed mixed system of one coarse block."""
    return SubdomainSystem(grid, coeff_array(perm), block)


def solve_dirichlet(system, lam):
    """Local solve with multiplier data on the block boundary, zero source."""
    return system.solve(lam=lam)


def solve_source(system, f):
    """Local solve with zero multiplier data and cell source density `f`."""
    F = np.asarray(f, dtype=float) * system.grid.cell_volume
    return system.solve(F=F)


def flux_trace(solution, edge):
    """Outward normal velocities of a block solution on one coarse edge."""
    system = solution.system
    if system.block not in edge.blocks:
        raise ValueError(f"edge {edge.index} not on block {system.block}")
    pos = system.boundary_positions(edge.faces)
    return solution.boundary_flux_out[pos] / system.grid.face_area[edge.axis]


# ------------------------------------------------------------ fine hybrid system

class FineHybridSystem:
    """Per-fine-cell condensation of the mixed system onto face multipliers
    over a region, with zero multiplier data on the region boundary.

    When the region covers the whole domain the operator is singular with a
    constant kernel (pure flux boundary) and solves are grounded.
    """

    def __init__(self, grid, coeff, region, source=None):
        self.grid = grid
        self.region = region
        self.cells = region.cells()
        coeff = coeff_array(coeff)

        self.unknown_faces = np.sort(region.interior_faces())
        pos = np.full(grid.n_faces, -1, dtype=np.int64)
        pos[self.unknown_faces] = np.arange(self.unknown_faces.size)

        faces, present = cell_face_tables(grid, self.cells)
        tmat = np.where(present, cell_t_matrix(grid, coeff, self.cells), 0.0)
        self._faces = faces
        self._present = present
        self._tmat = tmat
        self._sumt = tmat.sum(axis=1)
        self._fpos = np.where(present, pos[faces], -1)

        nf = self.unknown_faces.size
        k = faces.shape[1]
        rows, cols, vals = [], [], []
        for i in range(k):
            ri = self._fpos[:, i]
            for j in range(k):
                cj = self._fpos[:, j]
                m = (ri >= 0) & (cj >= 0)
                if not m.any():
                    continue
                contrib = -tmat[m, i] * tmat[m, j] / self._sumt[m]
                if i == j:
                    contrib = contrib + tmat[m, i]
                rows.append(ri[m])
                cols.append(cj[m])
                vals.append(contrib)
        self.matrix = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nf, nf)).tocsc()

        self.F_cells = np.zeros(self.cells.size)
        if source is not None:
            self.F_cells = (np.asarray(source, dtype=float)[self.cells]
                            * grid.cell_volume)
        self.load = self.load_from_sources(self.F_cells)
        self._whole_domain = self.cells.size == grid.n_cells
        self._lu = None

    def load_from_sources(self, F_region):
        """Condensed load vector for integrated sources per region cell."""
        g = np.zeros(self.unknown_faces.size)
        scale = np.where(self._sumt > 0, F_region / self._sumt, 0.0)
        for i in range(self._faces.shape[1]):
            m = self._fpos[:, i] >= 0
            np.add.at(g, self._fpos[m, i], self._tmat[m, i] * scale[m])
        return g

    def diagonal(self):
        return self.matrix.diagonal()

    def solve(self, rhs=None):
        """Multiplier solution with zero data on the region boundary."""
        b = self.load if rhs is None else rhs
        if self._lu is None:
            op = _grounded(self.matrix) if self._whole_domain else self.matrix
            self._op = op
            self._lu = _factorize(op, "fine hybrid system")
        return _refine_solve(self._lu, self._op, b)

    def multipliers_to_pressure(self, multipliers):
        """Cell pressures from a multiplier vector on the unknown faces."""
        lam_mat = np.zeros_like(self._tmat)
        known = self._fpos >= 0
        lam_mat[known] = multipliers[self._fpos[known]]
        return (self.F_cells + (self._tmat * lam_mat).sum(axis=1)) / self._sumt

    def recover(self, multipliers):
        """Cell pressures (mean-zero over the region) and single-valued face
        fluxes from a multiplier vector; fluxes through the region boundary
        use its zero multiplier data."""
        lam_mat = np.zeros_like(self._tmat)
        known = self._fpos >= 0
        lam_mat[known] = multipliers[self._fpos[known]]
        p = (self.F_cells + (self._tmat * lam_mat).sum(axis=1)) / self._sumt

        flux = np.zeros(self.grid.n_faces)
        for a in range(self.grid.dim):
            lo_col, hi_col = 2 * a, 2 * a + 1
            m = self._present[:, lo_col]
            flux[self._faces[m, lo_col]] = self._tmat[m, lo_col] * (
                lam_mat[m, lo_col] - p[m])
            m = self._present[:, hi_col]
            flux[self._faces[m, hi_col]] = self._tmat[m, hi_col] * (
                p[m] - lam_mat[m, hi_col])
        p_full = np.zeros(self.grid.n_cells)
        p_full[self.cells] = p - p.mean()
        return p_full, flux


def assemble_fine_hybrid(grid, perm, region, source=None):
    """Condense the mixed system of a region onto its fine-face multipliers."""
    return FineHybridSystem(grid, coeff_array(perm), region, source)


def whole_domain_region(grid):
    return Region(grid, (0,) * grid.dim, grid.fine_counts)
