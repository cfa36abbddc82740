"""Mortar spaces on the coarse skeleton, the interface operator, the coarse
interface solve, solution recovery and error norms.

Every mortar basis function is stored as a coefficient vector over skeleton
fine faces, so the coarse space is a subspace of the full skeleton space by
construction.  The full-skeleton operator (one flux-response entry per pair
of skeleton fine faces) is assembled once per coefficient field from the
per-block Dirichlet-to-Neumann matrices; coarse operators are its
projections onto the current basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from numpy.polynomial import legendre as npleg

from . import fem
from .fem import SolverError
from .parallel import ordered_map


class MortarSpace:
    """Per-edge ordered mortar basis; offline columns are supported on their
    own edge, online columns may extend over the neighborhood boundary."""

    def __init__(self, grid):
        self.grid = grid
        self.sk_faces, self.sk_pos = fem.skeleton_faces(grid)
        sizes = [e.n_faces for e in grid.skeleton]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.edge_slices = [slice(int(offsets[i]), int(offsets[i + 1]))
                            for i in range(len(sizes))]
        self.n_skeleton = int(offsets[-1])
        self.columns = []          # (positions, values) per basis function
        self.edge_columns = [[] for _ in grid.skeleton]
        self.offline_counts = [0 for _ in grid.skeleton]
        self.constant_coeffs = np.empty(0)
        self._P = None

    @property
    def dof(self):
        return len(self.columns)

    def online_counts(self):
        return [len(cols) - off for cols, off in
                zip(self.edge_columns, self.offline_counts)]

    def basis_per_edge(self):
        counts = [len(c) for c in self.edge_columns]
        return counts

    def add_column(self, edge_index, positions, values, constant_coeff=0.0):
        col = len(self.columns)
        self.columns.append((np.asarray(positions, dtype=np.int64),
                             np.asarray(values, dtype=float)))
        self.edge_columns[edge_index].append(col)
        self.constant_coeffs = np.append(self.constant_coeffs, constant_coeff)
        self._P = None
        return col

    def matrix(self):
        """Sparse basis matrix P (skeleton faces x dof)."""
        if self._P is None:
            rows, cols, vals = [], [], []
            for j, (pos, val) in enumerate(self.columns):
                rows.append(pos)
                cols.append(np.full(pos.size, j, dtype=np.int64))
                vals.append(val)
            if rows:
                self._P = sp.coo_matrix(
                    (np.concatenate(vals),
                     (np.concatenate(rows), np.concatenate(cols))),
                    shape=(self.n_skeleton, self.dof)).tocsc()
            else:
                self._P = sp.csc_matrix((self.n_skeleton, 0))
        return self._P

    def prolong(self, x):
        """Skeleton face values of a coarse coefficient vector."""
        return self.matrix() @ np.asarray(x, dtype=float)

    def column_vector(self, j):
        v = np.zeros(self.n_skeleton)
        pos, val = self.columns[j]
        v[pos] = val
        return v


def _legendre_face_averages(m, degree):
    """Exact averages of the Legendre polynomial over m equal subintervals
    of its reference interval."""
    c = np.zeros(degree + 1)
    c[degree] = 1.0
    anti = npleg.legint(c)
    breaks = -1.0 + 2.0 * np.arange(m + 1) / m
    vals = npleg.legval(breaks, anti)
    return (vals[1:] - vals[:-1]) / (2.0 / m)


def _graded_degree_pairs(k):
    pairs = []
    total = 0
    while len(pairs) < k:
        for dx in range(total + 1):
            pairs.append((dx, total - dx))
        total += 1
    return pairs[:k]


def offline_basis(grid, k):
    """Mortar space spanned per edge by the first k polynomial moments,
    represented by per-fine-face averages and orthonormalized edge-wise."""
    if k < 1:
        raise ValueError(f"need at least one offline function per edge, got {k}")
    space = MortarSpace(grid)
    for e in grid.skeleton:
        m = e.n_faces
        kk = min(k, m)
        if grid.dim == 2:
            cols = np.column_stack([_legendre_face_averages(m, deg)
                                    for deg in range(kk)])
        else:
            n = grid.n_fine
            av = {deg: _legendre_face_averages(n, deg) for deg in range(kk)}
            cols = []
            for dx, dy in _graded_degree_pairs(kk):
                vals = np.outer(av.setdefault(dx, _legendre_face_averages(n, dx)),
                                av.setdefault(dy, _legendre_face_averages(n, dy)))
                cols.append(vals.ravel(order="F"))
            cols = np.column_stack(cols)
        q, r = np.linalg.qr(cols)
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        q = q * signs
        sl = space.edge_slices[e.index]
        positions = np.arange(sl.start, sl.stop)
        for j in range(q.shape[1]):
            const = float(m) / q[:, 0].sum() if j == 0 else 0.0
            space.add_column(e.index, positions, q[:, j], constant_coeff=const)
        space.offline_counts[e.index] = q.shape[1]
    return space


def full_skeleton_space(grid):
    """The finest mortar space: one multiplier per skeleton fine face."""
    space = MortarSpace(grid)
    for e in grid.skeleton:
        sl = space.edge_slices[e.index]
        for i, p in enumerate(range(sl.start, sl.stop)):
            space.add_column(e.index, np.array([p]), np.array([1.0]),
                             constant_coeff=1.0)
        space.offline_counts[e.index] = e.n_faces
    return space


# --------------------------------------------------------- full-skeleton operator

class SkeletonAssembly:
    """Full-skeleton interface operator and load for one coefficient field.

    Holds the factorized per-block systems, the dense operator whose entry
    (p, q) is the negative flux-response pairing of skeleton faces p and q,
    and the load from per-block source solves.
    """

    def __init__(self, grid, perm, f=None, source_integrated=None):
        self.grid = grid
        self.coeff = fem.coeff_array(perm)
        self.sk_faces, self.sk_pos = fem.skeleton_faces(grid)
        n = self.sk_faces.size
        self.systems = ordered_map(
            lambda b: fem.SubdomainSystem(grid, self.coeff, b),
            range(grid.total_blocks))
        self.block_positions = []
        for sys in self.systems:
            pos = self.sk_pos[sys.bface_ids]
            if (pos < 0).any():
                raise SolverError(
                    f"block {sys.block}: boundary face off the skeleton")
            self.block_positions.append(pos)

        if source_integrated is not None:
            self.F_cells = np.asarray(source_integrated, dtype=float)
        elif f is not None:
            self.F_cells = np.asarray(f, dtype=float) * grid.cell_volume
        else:
            self.F_cells = np.zeros(grid.n_cells)

        self.operator = np.zeros((n, n))
        self.load = np.zeros(n)
        for sys, pos in zip(self.systems, self.block_positions):
            self.operator[np.ix_(pos, pos)] += sys.dtn()
            self.load[pos] += sys.load_vector(self.F_cells[sys.cells])

    @property
    def n_skeleton(self):
        return self.sk_faces.size

    def residual(self, lam_values):
        """Full-skeleton residual of a coarse solution's skeleton values."""
        return self.load - self.operator @ lam_values

    def seminorm2(self, v):
        return max(float(v @ (self.operator @ v)), 0.0)

    def edge_positions(self, edge):
        start = int(self.sk_pos[edge.faces[0]])
        return np.arange(start, start + edge.n_faces)

    # -- recovery -------------------------------------------------------

    def block_solutions(self, lam_values, include_source=True):
        sols = []
        for sys, pos in zip(self.systems, self.block_positions):
            F = self.F_cells[sys.cells] if include_source else None
            sols.append(sys.solve(lam=lam_values[pos], F=F))
        return sols

    def two_sided_skeleton_flux(self, sols):
        """+axis signed skeleton fluxes seen from the lower and upper blocks."""
        n = self.sk_faces.size
        q_lo = np.zeros(n)
        q_up = np.zeros(n)
        for sys, pos, sol in zip(self.systems, self.block_positions, sols):
            signed = sol.boundary_flux_out * sys.bface_sign
            upper_side = sys.bface_sign < 0
            q_lo[pos[~upper_side]] = signed[~upper_side]
            q_up[pos[upper_side]] = signed[upper_side]
        return q_lo, q_up

    def downscale(self, skeleton_q):
        """Single-valued conservative flux field from prescribed skeleton
        fluxes: per-block mass defects are removed by a coarse min-norm
        correction, then block solves with prescribed boundary fluxes rebuild
        the interior fluxes."""
        grid = self.grid
        q = skeleton_q.copy()
        edges = grid.skeleton
        defects = np.array([
            float((q[pos] * sys.bface_sign).sum() - self.F_cells[sys.cells].sum())
            for sys, pos in zip(self.systems, self.block_positions)])
        scale = max(float(np.abs(q).sum() + np.abs(self.F_cells).sum()), 1e-300)
        if np.abs(defects).max() > 1e-14 * scale and edges:
            inc = np.zeros((grid.total_blocks, len(edges)))
            for e in edges:
                inc[e.blocks[0], e.index] = 1.0
                inc[e.blocks[1], e.index] = -1.0
            gamma = np.linalg.lstsq(inc, -defects, rcond=None)[0]
            for e in edges:
                sl = self._edge_slice(e)
                q[sl] += gamma[e.index] / e.n_faces
        flux = np.zeros(grid.n_faces)
        flux[self.sk_faces] = q
        for sys, pos in zip(self.systems, self.block_positions):
            out = q[pos] * sys.bface_sign
            _, q_int = sys.neumann_solve(out, self.F_cells[sys.cells])
            flux[sys.int_faces] = q_int
        return flux

    def _edge_slice(self, edge):
        start = int(self.sk_pos[edge.faces[0]])
        return slice(start, start + edge.n_faces)

    def recover(self, lam_values, level=None, coeffs=None):
        """Per-block superposition of multiplier and source solves, with a
        mean-zero pressure, cell velocities from each block's own fluxes, and
        a unified conservative flux field for transport."""
        grid = self.grid
        sols = self.block_solutions(lam_values)
        p = np.zeros(grid.n_cells)
        fl = np.zeros(grid.n_faces)   # face value seen from its lower cell
        fu = np.zeros(grid.n_faces)   # face value seen from its upper cell
        for sys, sol in zip(self.systems, sols):
            p[sys.cells] = sol.p
            fl[sys.int_faces] = sol.interior_flux
            fu[sys.int_faces] = sol.interior_flux
            signed = sol.boundary_flux_out * sys.bface_sign
            lower_side = sys.bface_sign > 0
            fl[sys.bface_ids[lower_side]] = signed[lower_side]
            fu[sys.bface_ids[~lower_side]] = signed[~lower_side]
        p = p - p.mean()

        faces, present = fem.cell_face_tables(grid)
        vel = np.zeros((grid.n_cells, grid.dim))
        for a in range(grid.dim):
            qlo = np.where(present[:, 2 * a], fu[faces[:, 2 * a]], 0.0)
            qhi = np.where(present[:, 2 * a + 1], fl[faces[:, 2 * a + 1]], 0.0)
            vel[:, a] = 0.5 * (qlo + qhi) / grid.face_area[a]

        q_lo, q_up = self.two_sided_skeleton_flux(sols)
        flux = self.downscale(0.5 * (q_lo + q_up))
        jump = float(np.abs(q_lo - q_up).max()) if q_lo.size else 0.0
        ms = MultiscaleSolution(lam=lam_values, p=p, velocity=vel, flux=flux,
                                level=level, coeffs=coeffs,
                                skeleton_jump=jump)
        ms.assembly = self
        return ms

    def extend(self, lam_values, include_source=False):
        """Multiplier values on every interior fine face: skeleton faces keep
        the given data, block-interior faces take the local face pressures of
        the per-block solves (zero-source by default)."""
        grid = self.grid
        out = np.zeros(grid.n_faces)
        out[self.sk_faces] = lam_values
        sols = self.block_solutions(lam_values, include_source=include_source)
        for sys, sol in zip(self.systems, sols):
            lam_int = (sys.int_tl * sol.p[sys.int_lower]
                       + sys.int_tu * sol.p[sys.int_upper]) / (sys.int_tl + sys.int_tu)
            out[sys.int_faces] = lam_int
        return out


@dataclass
class MultiscaleSolution:
    """Recovered coarse-space solution on the fine grid."""

    lam: np.ndarray
    p: np.ndarray
    velocity: np.ndarray
    flux: np.ndarray
    level: int | None = None
    coeffs: np.ndarray | None = None
    skeleton_jump: float = 0.0
    assembly: object = field(default=None, repr=False, compare=False)


# ----------------------------------------------------------- interface operator

@dataclass
class InterfaceOperator:
    """Dense coarse interface operator and load on the current mortar basis."""

    space: MortarSpace
    matrix: np.ndarray
    rhs: np.ndarray
    last_residual: float = field(default=0.0, compare=False)


def assemble_interface(space, systems, f=None):
    """Assemble the coarse operator by local solves: one multiplier solve per
    (block, touching basis function) and one source solve per block."""
    grid = space.grid
    n = space.dof
    A = np.zeros((n, n))
    g = np.zeros(n)
    sk_faces, sk_pos = fem.skeleton_faces(grid)
    F = (np.asarray(f, dtype=float) * grid.cell_volume
         if f is not None else np.zeros(grid.n_cells))
    for sys in systems:
        pos = sk_pos[sys.bface_ids]
        touching = [j for j in range(n)
                    if np.intersect1d(space.columns[j][0], pos).size]
        basis_local = {}
        for j in touching:
            colpos, colval = space.columns[j]
            local = np.zeros(pos.size)
            idx = {int(p): i for i, p in enumerate(pos)}
            for p, v in zip(colpos, colval):
                if int(p) in idx:
                    local[idx[int(p)]] = v
            basis_local[j] = local
        for j in touching:
            sol = sys.solve(lam=basis_local[j])
            for i in touching:
                A[i, j] -= float(sol.boundary_flux_out @ basis_local[i])
        if F[sys.cells].any():
            sol = sys.solve(F=F[sys.cells])
            for i in touching:
                g[i] += float(sol.boundary_flux_out @ basis_local[i])
    return InterfaceOperator(space, A, g)


def project_interface(space, assembly):
    """Coarse operator as the projection of the full-skeleton operator."""
    P = space.matrix()
    W = assembly.operator @ P.toarray()
    return InterfaceOperator(space, P.T @ W, P.T @ assembly.load)


def solve_interface(op, cg_threshold=5000, tol=1e-12):
    """Solve the coarse interface problem with the constant mode deflated.

    Dense factorization with iterative refinement below `cg_threshold`
    unknowns, deflated conjugate gradients above.
    """
    A, g = op.matrix, op.rhs
    n = A.shape[0]
    c = op.space.constant_coeffs
    if c.size != n:
        raise SolverError("space/operator size mismatch")
    scale = float(np.abs(g).max())
    if scale == 0.0:
        op.last_residual = 0.0
        return np.zeros(n)
    cc = float(c @ c)
    if n < cg_threshold:
        shift = (np.trace(A) / n) / max(cc, 1e-300)
        Ad = A + shift * np.outer(c, c)
        try:
            chol = sla.cho_factor(Ad)
            x = sla.cho_solve(chol, g)
            gnorm = float(np.linalg.norm(g))
            for _ in range(4):
                r = g - Ad @ x
                if np.linalg.norm(r) <= 1e-13 * gnorm:
                    break
                x = x + sla.cho_solve(chol, r)
        except np.linalg.LinAlgError:
            x = np.linalg.lstsq(A, g, rcond=None)[0]
    else:
        x = _deflated_cg(A, g, c, tol)
    if cc > 0:
        x = x - c * (float(c @ x) / cc)
    res = float(np.linalg.norm(A @ x - g) / np.linalg.norm(g))
    op.last_residual = res
    if res > 1e-8:
        raise SolverError(f"interface solve stalled, relative residual {res:g}")
    return x


def _deflated_cg(A, g, c, tol, max_iter=None):
    n = A.shape[0]
    cc = float(c @ c)

    def project(v):
        return v - c * (float(c @ v) / cc) if cc > 0 else v

    d = A.diagonal().copy()
    d[d <= 0] = 1.0
    b = project(g)
    x = np.zeros(n)
    r = b.copy()
    z = project(r / d)
    p = z.copy()
    rz = float(r @ z)
    bnorm = float(np.linalg.norm(b))
    max_iter = max_iter or 20 * n
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        Ap = project(A @ p)
        alpha = rz / float(p @ Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        z = project(r / d)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"interface CG did not converge: relative residual "
        f"{np.linalg.norm(r) / bnorm:g}")


def recover_solution(lam_coeffs, space, assembly, level=None):
    """Fine-grid solution of a coarse coefficient vector."""
    lam_values = space.prolong(lam_coeffs)
    return assembly.recover(lam_values, level=level, coeffs=np.asarray(lam_coeffs))


def residual_on_skeleton(assembly, lam_values):
    """Componentwise full-skeleton residual of the current solution."""
    return assembly.residual(lam_values)


def _velocity_of(obj):
    v = obj.velocity
    return v() if callable(v) else v


def errors(ms, ref, perm):
    """Relative L2 pressure error and relative weighted (inverse-coefficient)
    velocity error, by cell-midpoint quadrature."""
    kappa = fem.coeff_array(perm)
    p_den = float(np.sum(ref.p ** 2))
    if p_den == 0.0:
        raise ValueError("reference pressure has zero norm")
    e_p = np.sqrt(float(np.sum((ms.p - ref.p) ** 2)) / p_den)
    v_ms, v_ref = _velocity_of(ms), _velocity_of(ref)
    w = 1.0 / kappa
    u_den = float(np.sum(w * (v_ref ** 2).sum(axis=1)))
    if u_den == 0.0:
        raise ValueError("reference velocity has zero norm")
    diff = v_ms - v_ref
    e_u = np.sqrt(float(np.sum(w * (diff ** 2).sum(axis=1))) / u_den)
    return e_p, e_u
