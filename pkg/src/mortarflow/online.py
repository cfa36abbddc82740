"""Residual-driven online enrichment of the mortar space.

Each level solves the coarse interface problem, evaluates the full-skeleton
residual, and computes one new basis function per interior coarse edge: the
plain variant solves the residual equation restricted to the skeleton
unknowns of the edge's two-block neighborhood (zero multiplier beyond), the
oversampled variant solves the fine-face hybrid problem on an enlarged box
around the edge and restricts the result to the edge.

A "separated" subset of edges whose local problems cannot interact through
any common block is tracked per level; for it the energy decrease of the
Galerkin solution is bounded below by the sum of local residual dual norms,
which is the quantity the convergence diagnostics verify.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem, mortar
from .fem import SolverError
from .geometry import color_classes, region_for_case, separated_edges


@dataclass
class EnrichmentConfig:
    """Controls for the enrichment loop."""

    max_levels: int = 5
    offline_k: int = 1
    case: str = "1"               # "1" (no oversampling), "a", or "b"
    residual_tol: float = 0.0     # stop when the summed indicator drops below
    drop_tol: float = 1e-10       # post-orthogonalization norm cutoff
    gauss_seidel: bool = False    # refresh the residual after each color group

    def __post_init__(self):
        if self.max_levels < 0:
            raise ValueError("max_levels must be nonnegative")
        if self.offline_k < 1:
            raise ValueError("need at least one offline function per edge")
        if self.drop_tol <= 0 or self.residual_tol < 0:
            raise ValueError("tolerances must be positive")
        if self.case not in ("1", "a", "b"):
            raise ValueError(f"unknown oversampling case {self.case!r}")


@dataclass
class OnlineCandidate:
    """A normalized online basis vector in skeleton coordinates."""

    edge_index: int
    positions: np.ndarray
    values: np.ndarray
    dual_norm2: float


@dataclass
class EnrichmentHistory:
    """Per-level record of the enrichment run plus the oracles needed by the
    convergence diagnostics."""

    dofs: list = field(default_factory=list)
    e_p: list = field(default_factory=list)
    e_u: list = field(default_factory=list)
    seminorm2: list = field(default_factory=list)
    rsum_group: list = field(default_factory=list)
    rsum_all: list = field(default_factory=list)
    rroot_all: list = field(default_factory=list)
    kept: list = field(default_factory=list)
    group_edges: list = field(default_factory=list)
    space: mortar.MortarSpace | None = None
    assembly: mortar.SkeletonAssembly | None = None
    lam_star: np.ndarray | None = None
    solutions: list = field(default_factory=list)

    @property
    def levels(self):
        return len(self.dofs)


def neighborhood_positions(assembly, edge):
    """Skeleton positions on the boundary of the edge's two blocks."""
    grid = assembly.grid
    idx = {edge.index}
    for b in edge.blocks:
        idx.update(e.index for e in grid.block_skeleton_edges(b))
    return np.concatenate([assembly.edge_positions(grid.skeleton[i])
                           for i in sorted(idx)])


def local_dual_norm2(assembly, edge, residual):
    """Squared dual norm of the residual restriction on one neighborhood,
    i.e. the energy of the local residual solve."""
    cand = online_basis_local(edge, residual, assembly)
    return 0.0 if cand is None else cand.dual_norm2


def online_basis_local(edge, residual, assembly, skip_tol=0.0):
    """New basis from the neighborhood-restricted residual problem.

    The local operator is the restriction of the full-skeleton operator to
    the neighborhood's skeleton unknowns; the singular constant direction (it
    appears only when the neighborhood sees the whole skeleton) is handled by
    a minimum-norm least-squares solve.  Returns None when the local residual
    vanishes.
    """
    I = neighborhood_positions(assembly, edge)
    A = assembly.operator[np.ix_(I, I)]
    r = residual[I]
    mu = np.linalg.lstsq(A, r, rcond=None)[0]
    r2 = max(float(r @ mu), 0.0)
    if r2 <= skip_tol:
        return None
    return OnlineCandidate(edge.index, I, mu / np.sqrt(r2), r2)


class OversamplingWorkspace:
    """Cached per-edge factorizations of the fine hybrid operator on the
    oversampled boxes; built once per coefficient field."""

    def __init__(self, assembly, f_density, case):
        grid = assembly.grid
        self.assembly = assembly
        self.case = case
        self.hybrid = fem.FineHybridSystem(
            grid, assembly.coeff, fem.whole_domain_region(grid), source=f_density)
        pos = np.full(grid.n_faces, -1, dtype=np.int64)
        pos[self.hybrid.unknown_faces] = np.arange(self.hybrid.unknown_faces.size)
        csr = self.hybrid.matrix.tocsr()
        self.edge_data = []
        import scipy.sparse.linalg as spla
        for e in grid.skeleton:
            region = region_for_case(grid, e, case)
            J = np.sort(region.interior_faces())
            Jpos = pos[J]
            sub = csr[Jpos][:, Jpos].tocsc()
            if J.size == self.hybrid.unknown_faces.size:
                sub = fem._grounded(sub)
            try:
                lu = spla.splu(sub)
            except RuntimeError as exc:
                raise SolverError(
                    f"edge {e.index}: oversampled factorization failed: {exc}"
                ) from exc
            epos = np.searchsorted(J, e.faces)
            self.edge_data.append((Jpos, lu, epos))

    def fine_residual(self, lam_values):
        """Fine-face residual of the zero-source extension of the current
        skeleton solution."""
        ext = self.assembly.extend(lam_values, include_source=False)
        x = ext[self.hybrid.unknown_faces]
        return self.hybrid.load - self.hybrid.matrix @ x

    def candidate(self, edge, fine_res, skip_tol=0.0):
        Jpos, lu, epos = self.edge_data[edge.index]
        mu_plus = lu.solve(fine_res[Jpos])
        rho = mu_plus[epos]
        E = self.assembly.edge_positions(edge)
        n2 = max(float(rho @ (self.assembly.operator[np.ix_(E, E)] @ rho)), 0.0)
        if n2 <= skip_tol:
            return None
        return OnlineCandidate(edge.index, E, rho / np.sqrt(n2), n2)


def online_basis_oversampled(edge, grid, perm, lam_values, f, case,
                             workspace=None, assembly=None):
    """New basis from the oversampled fine-level residual problem: extend the
    coarse solution to all fine faces by zero-source block solves, solve the
    hybrid problem on the oversampled box with zero boundary multiplier, and
    restrict to the edge."""
    if workspace is None:
        if assembly is None:
            assembly = mortar.SkeletonAssembly(grid, perm, f=f)
        workspace = OversamplingWorkspace(assembly, f, case)
    fine_res = workspace.fine_residual(lam_values)
    return workspace.candidate(edge, fine_res)


class _ColumnCache:
    """Memoized operator images and energies of mortar basis columns."""

    def __init__(self, assembly):
        self.assembly = assembly
        self.image = {}
        self.norm2 = {}

    def get(self, space, j):
        if j not in self.image:
            v = space.column_vector(j)
            w = self.assembly.operator @ v
            self.image[j] = w
            self.norm2[j] = max(float(v @ w), 0.0)
        return self.image[j], self.norm2[j]


def enrich_space(space, candidates, assembly, drop_tol=1e-10, cache=None):
    """Per-edge Gram-Schmidt of the candidates against the existing basis in
    the interface energy product; near-dependent candidates are dropped.
    Returns the number of functions kept."""
    if cache is None:
        cache = _ColumnCache(assembly)
    kept = 0
    for cand in candidates:
        if cand is None:
            continue
        v = np.zeros(space.n_skeleton)
        v[cand.positions] = cand.values
        cols = space.edge_columns[cand.edge_index]
        for _ in range(2):
            for j in cols:
                w, n2 = cache.get(space, j)
                if n2 <= 0:
                    continue
                v -= (float(v @ w) / n2) * space.column_vector(j)
        w = assembly.operator @ v
        n2 = max(float(v @ w), 0.0)
        if np.sqrt(n2) < drop_tol:
            continue
        v /= np.sqrt(n2)
        w /= np.sqrt(n2)
        pos = np.flatnonzero(v)
        j = space.add_column(cand.edge_index, pos, v[pos])
        cache.image[j] = w
        cache.norm2[j] = 1.0
        kept += 1
    return kept


def enrichment_loop(grid, perm, f, config, progress=None, keep_solutions=False):
    """Iteratively enrich the offline space and record the per-level
    diagnostics against the fine-scale oracle."""
    assembly = mortar.SkeletonAssembly(grid, perm, f=f)
    fine = fem.fine_reference_solve(grid, perm, f)
    lam_star = fine.skeleton_values
    space = mortar.offline_basis(grid, config.offline_k)
    groups = color_classes(grid)
    diag_group = separated_edges(grid)
    cache = _ColumnCache(assembly)
    workspace = (OversamplingWorkspace(assembly, f, config.case)
                 if config.case != "1" else None)

    hist = EnrichmentHistory(space=space, assembly=assembly, lam_star=lam_star,
                             group_edges=diag_group)
    gscale = float(np.linalg.norm(assembly.load))
    skip_tol = (1e-15 * gscale) ** 2

    # incremental coarse operator on the growing basis
    A_c = np.zeros((0, 0))
    g_c = np.zeros(0)

    for level in range(config.max_levels + 1):
        A_c, g_c = _extend_operator(A_c, g_c, space, cache, assembly)
        op = mortar.InterfaceOperator(space, A_c, g_c)
        x = mortar.solve_interface(op)
        lam = space.prolong(x)
        residual = assembly.residual(lam)
        ms = assembly.recover(lam, level=level, coeffs=x)
        e_p, e_u = mortar.errors(ms, fine, perm)
        err = lam_star - lam
        sem2 = assembly.seminorm2(err)

        r_all = np.array([local_dual_norm2(assembly, e, residual)
                          for e in grid.skeleton])
        hist.dofs.append(space.dof)
        hist.e_p.append(e_p)
        hist.e_u.append(e_u)
        hist.seminorm2.append(sem2)
        hist.rsum_group.append(float(r_all[diag_group].sum()))
        hist.rsum_all.append(float(r_all.sum()))
        hist.rroot_all.append(float(np.sqrt(np.clip(r_all, 0, None)).sum()))
        if keep_solutions:
            hist.solutions.append(ms)
        if progress:
            progress(level, space.dof, e_p, e_u)

        if level == config.max_levels:
            hist.kept.append(0)
            break
        if config.residual_tol > 0 and \
                np.sqrt(max(hist.rsum_all[-1], 0.0)) <= config.residual_tol:
            hist.kept.append(0)
            break

        kept = 0
        if config.gauss_seidel:
            for group in groups:
                cands = _group_candidates(grid, assembly, workspace, residual,
                                          lam, group, config.case, skip_tol)
                kept += enrich_space(space, cands, assembly,
                                     drop_tol=config.drop_tol, cache=cache)
                if group is not groups[-1]:
                    A_c, g_c = _extend_operator(A_c, g_c, space, cache,
                                                assembly)
                    op = mortar.InterfaceOperator(space, A_c, g_c)
                    x = mortar.solve_interface(op)
                    lam = space.prolong(x)
                    residual = assembly.residual(lam)
        else:
            fine_res = (workspace.fine_residual(lam)
                        if workspace is not None else None)
            cands = []
            for group in groups:
                for eidx in group:
                    edge = grid.skeleton[eidx]
                    if workspace is None:
                        cands.append(online_basis_local(edge, residual,
                                                        assembly, skip_tol))
                    else:
                        cands.append(workspace.candidate(edge, fine_res,
                                                         skip_tol))
            kept = enrich_space(space, cands, assembly,
                                drop_tol=config.drop_tol, cache=cache)
        hist.kept.append(kept)
        if kept == 0:
            break
    return hist


def _group_candidates(grid, assembly, workspace, residual, lam, group, case,
                      skip_tol):
    if workspace is None:
        return [online_basis_local(grid.skeleton[i], residual, assembly,
                                   skip_tol) for i in group]
    fine_res = workspace.fine_residual(lam)
    return [workspace.candidate(grid.skeleton[i], fine_res, skip_tol)
            for i in group]


def _extend_operator(A_c, g_c, space, cache, assembly):
    """Grow the dense coarse operator by the newly added basis columns."""
    ncols = space.dof
    old = g_c.size
    if old == ncols:
        return A_c, g_c
    Pd = space.matrix().toarray()
    Wnew = np.column_stack([cache.get(space, j)[0] for j in range(old, ncols)])
    block = Pd.T @ Wnew
    A_new = np.zeros((ncols, ncols))
    A_new[:old, :old] = A_c
    A_new[:, old:] = block
    A_new[old:, :] = block.T
    A_new = 0.5 * (A_new + A_new.T)
    g_new = np.zeros(ncols)
    g_new[:old] = g_c
    g_new[old:] = Pd[:, old:].T @ assembly.load
    return A_new, g_new


@dataclass
class ConvergenceReport:
    """Empirical check of the contraction behaviour of an enrichment run."""

    monotone: bool
    decrease_bound_ok: bool
    level_slack: list
    measured_constant: float
    constants: list

    def summary(self):
        return (f"monotone={self.monotone} decrease_bound_ok="
                f"{self.decrease_bound_ok} C*={self.measured_constant:.3g}")


def convergence_diagnostics(history, tol=1e-8):
    """Verify per level that the energy error decreased at least by the
    summed local residual dual norms over the separated group (up to the
    stated relative slack), and report the smallest admissible constant of
    the a-posteriori bound."""
    if history.levels < 2:
        raise ValueError("need at least two recorded levels")
    sem2 = history.seminorm2
    slack = []
    ok = True
    monotone = True
    for l in range(history.levels - 1):
        lhs = sem2[l] - sem2[l + 1]
        rhs = history.rsum_group[l] - tol * sem2[l]
        slack.append(lhs - rhs)
        if lhs < rhs:
            ok = False
        if sem2[l + 1] > sem2[l] * (1.0 + 1e-12) + 1e-300:
            monotone = False
    constants = [np.sqrt(s2) / r if r > 0 else np.nan
                 for s2, r in zip(sem2, history.rroot_all)]
    finite = [c for c in constants if np.isfinite(c)]
    cstar = max(finite) if finite else np.nan
    return ConvergenceReport(monotone, ok, slack, cstar, constants)
