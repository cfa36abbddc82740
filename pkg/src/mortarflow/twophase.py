"""Sequential two-phase flow and transport on the fine grid.

Each time step solves the total-mobility pressure equation in the fixed
(enriched) mortar space, optionally smooths the multiplier field by damped
Jacobi sweeps on the global fine hybrid system, downscales to a single-valued
conservative flux field, and advances the water saturation with an explicit
upwind finite-volume step (internally sub-stepped to respect the CFL limit).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fem, mortar
from .fem import FineHybridSystem


class FluidModel:
    """Two-phase fluid with power-law relative permeabilities."""

    def __init__(self, mu_w=1.0, mu_o=5.0, exp_w=2.0, exp_o=2.0,
                 s_wr=0.0, s_or=0.0, rho_w=1.0):
        if mu_w <= 0 or mu_o <= 0:
            raise ValueError("viscosities must be positive")
        if not (0 <= s_wr < 1 and 0 <= s_or < 1 and s_wr + s_or < 1):
            raise ValueError("invalid residual saturations")
        self.mu_w = float(mu_w)
        self.mu_o = float(mu_o)
        self.exp_w = float(exp_w)
        self.exp_o = float(exp_o)
        self.s_wr = float(s_wr)
        self.s_or = float(s_or)
        self.rho_w = float(rho_w)
        self.clamp_events = 0
        self._max_slope = None

    @classmethod
    def linear(cls):
        """Unit-mobility fluid with linear flux (for transport testing)."""
        return cls(mu_w=1.0, mu_o=1.0, exp_w=1.0, exp_o=1.0)

    def rel_perms(self, s):
        se = np.clip((np.asarray(s, dtype=float) - self.s_wr)
                     / (1.0 - self.s_wr - self.s_or), 0.0, 1.0)
        return se ** self.exp_w, (1.0 - se) ** self.exp_o

    def max_flux_slope(self):
        """Max |d f_w / d s| over [0, 1], used for the transport sub-step."""
        if self._max_slope is None:
            s = np.linspace(0.0, 1.0, 4001)
            _, fw = frac_flow(s, self, count_clamps=False)
            self._max_slope = float(np.max(np.abs(np.diff(fw)))
                                    / (s[1] - s[0]))
        return self._max_slope


def frac_flow(s, fluid, count_clamps=True):
    """Total mobility and water fractional flow at saturation `s`.

    Saturations outside [0, 1] are clamped; clamp events are counted on the
    fluid model.
    """
    arr = np.asarray(s, dtype=float)
    out_of_range = int(np.count_nonzero((arr < 0.0) | (arr > 1.0)))
    if out_of_range and count_clamps:
        fluid.clamp_events += out_of_range
    arr = np.clip(arr, 0.0, 1.0)
    krw, kro = fluid.rel_perms(arr)
    lam_w = krw / fluid.mu_w
    lam_o = kro / fluid.mu_o
    lam = lam_w + lam_o
    fw = lam_w / lam
    if np.isscalar(s):
        return float(lam), float(fw)
    return lam, fw


@dataclass(frozen=True)
class Well:
    cell: int
    rate: float          # volumetric rate; positive injects, negative produces
    kind: str

    def __post_init__(self):
        if self.kind not in ("injector", "producer"):
            raise ValueError(f"unknown well kind {self.kind!r}")
        if self.kind == "injector" and self.rate <= 0:
            raise ValueError("injector rate must be positive")
        if self.kind == "producer" and self.rate >= 0:
            raise ValueError("producer rate must be negative")


class WellSet:
    """Rate-controlled point wells; total rate must balance to zero."""

    def __init__(self, wells):
        self.wells = list(wells)
        total = sum(w.rate for w in self.wells)
        scale = sum(abs(w.rate) for w in self.wells)
        if scale > 0 and abs(total) > 1e-12 * scale:
            raise ValueError(f"well rates do not balance: net {total:g}")

    @classmethod
    def five_spot(cls, grid, injection_rate=1.0):
        """Four corner injectors and one middle producer."""
        mx, my = grid.fine_counts[0], grid.fine_counts[1]
        corners = [(0, 0), (mx - 1, 0), (0, my - 1), (mx - 1, my - 1)]
        center = (mx // 2, my // 2)
        if grid.dim == 3:
            mz = grid.fine_counts[2]
            corners = [c + (0,) for c in corners]
            center = center + (mz // 2,)
        wells = [Well(int(grid.cell_index(*c)), injection_rate, "injector")
                 for c in corners]
        wells.append(Well(int(grid.cell_index(*center)),
                          -4.0 * injection_rate, "producer"))
        return cls(wells)

    def integrated(self, grid):
        F = np.zeros(grid.n_cells)
        for w in self.wells:
            F[w.cell] += w.rate
        return F

    def injectors(self):
        return [w for w in self.wells if w.kind == "injector"]

    def producers(self):
        return [w for w in self.wells if w.kind == "producer"]


@dataclass
class TwoPhaseState:
    """Saturation field and running transport diagnostics."""

    s: np.ndarray
    time: float = 0.0
    clipped_volume: float = 0.0
    mass_error: float = 0.0
    substeps: int = 0


def pressure_step(grid, perm, space, s, wells, fluid, smoothing=False,
                  smooth_iters=10, damping=2.0 / 3.0):
    """Pressure solve in the fixed mortar space with total mobility
    coefficient; returns a recovered solution whose flux field is
    transport-ready (single-valued and conservative)."""
    lam_t, _ = frac_flow(s, fluid, count_clamps=False)
    coeff = fem.coeff_array(perm) * lam_t
    F = wells.integrated(grid)
    assembly = mortar.SkeletonAssembly(grid, coeff, source_integrated=F)
    op = mortar.project_interface(space, assembly)
    x = mortar.solve_interface(op)
    ms = assembly.recover(space.prolong(x), coeffs=x)
    if smoothing:
        hybrid = FineHybridSystem(grid, coeff, fem.whole_domain_region(grid),
                                  source=F / grid.cell_volume)
        ms, _ = jacobi_smooth(hybrid, ms, iters=smooth_iters, damping=damping)
    return ms


def jacobi_smooth(hybrid, ms, iters=10, damping=2.0 / 3.0):
    """Damped Jacobi sweeps on the global fine hybrid system, started from
    the fine-face traces of the multiscale solution.

    Returns the smoothed solution (conservative flux rebuilt by the same
    averaging and downscaling used for recovery) and the residual-norm
    history over the sweeps.
    """
    assembly = ms.assembly
    if assembly is None:
        raise ValueError("multiscale solution carries no assembly")
    grid = assembly.grid
    x = assembly.extend(ms.lam, include_source=True)[hybrid.unknown_faces]
    A, b = hybrid.matrix, hybrid.load
    D = hybrid.diagonal()
    history = []
    r = b - A @ x
    history.append(float(np.linalg.norm(r)))
    for _ in range(iters):
        x = x + damping * (r / D)
        r = b - A @ x
        history.append(float(np.linalg.norm(r)))

    p = hybrid.multipliers_to_pressure(x)
    th = fem.half_transmissibilities(grid, assembly.coeff)
    sk = assembly.sk_faces
    lam_sk = np.zeros(grid.n_faces)
    lam_sk[hybrid.unknown_faces] = x
    axes = grid.face_axis(sk)
    q_bar = np.zeros(sk.size)
    for a in range(grid.dim):
        m = axes == a
        if not m.any():
            continue
        lo, up = grid.face_cells(a, sk[m])
        lam_f = lam_sk[sk[m]]
        q_lo = th[a][lo] * (p[lo] - lam_f)
        q_up = th[a][up] * (lam_f - p[up])
        q_bar[m] = 0.5 * (q_lo + q_up)
    flux = assembly.downscale(q_bar)
    p = p - p.mean()
    smoothed = mortar.MultiscaleSolution(
        lam=lam_sk[sk], p=p, velocity=fem.velocity_from_flux(grid, flux),
        flux=flux, level=ms.level, coeffs=ms.coeffs,
        skeleton_jump=ms.skeleton_jump)
    smoothed.assembly = assembly
    return smoothed, history


def transport_step(state, flux, wells, dt, grid, perm, fluid, cfl_target=0.9):
    """Explicit upwind finite-volume saturation update over one time step,
    internally sub-stepped so the cell CFL number stays below `cfl_target`.

    Rejects flux fields whose per-cell balance against the well rates exceeds
    1e-8 relative.  Saturations are clipped to [0, 1] with the clipped volume
    accounted.
    """
    if dt <= 0:
        raise ValueError("time step must be positive")
    F = wells.integrated(grid)
    res = fem.divergence_residual(grid, flux, F)
    scale = max(float(np.abs(flux).max(initial=0.0)),
                float(np.abs(F).max(initial=0.0)), 1e-300)
    worst = float(np.abs(res).max())
    if worst > 1e-8 * scale:
        raise ValueError(
            f"velocity not locally conservative: cell imbalance {worst:g} "
            f"(relative {worst / scale:g})")

    porevol = perm.porosity * grid.cell_volume
    inj_cells = np.array([w.cell for w in wells.injectors()], dtype=np.int64)
    inj_rates = np.array([w.rate for w in wells.injectors()])
    prod_cells = np.array([w.cell for w in wells.producers()], dtype=np.int64)
    prod_rates = np.array([-w.rate for w in wells.producers()])

    outflux = np.zeros(grid.n_cells)
    axis_faces = []
    for a in range(grid.dim):
        lower, upper, faces = fem._axis_interior_faces(grid, a)
        q = flux[faces]
        axis_faces.append((lower, upper, q))
        outflux += np.bincount(lower, weights=np.maximum(q, 0.0),
                               minlength=grid.n_cells)
        outflux += np.bincount(upper, weights=np.maximum(-q, 0.0),
                               minlength=grid.n_cells)
    if prod_cells.size:
        np.add.at(outflux, prod_cells, prod_rates)

    slope = max(fluid.max_flux_slope(), 1.0)
    rate = float(np.max(outflux / porevol)) if grid.n_cells else 0.0
    n_sub = max(1, math.ceil(dt * rate * slope / cfl_target - 1e-12))
    dt_s = dt / n_sub

    s = state.s.copy()
    mass0 = float(np.sum(s * porevol))
    water_in = 0.0
    water_out = 0.0
    clipped = 0.0
    for _ in range(n_sub):
        _, fw = frac_flow(s, fluid)
        div_w = np.zeros(grid.n_cells)
        for lower, upper, q in axis_faces:
            wf = np.where(q >= 0.0, fw[lower], fw[upper]) * q
            div_w += np.bincount(lower, weights=wf, minlength=grid.n_cells)
            div_w -= np.bincount(upper, weights=wf, minlength=grid.n_cells)
        src = np.zeros(grid.n_cells)
        if inj_cells.size:
            np.add.at(src, inj_cells, inj_rates / fluid.rho_w)
            water_in += dt_s * float(np.sum(inj_rates)) / fluid.rho_w
        if prod_cells.size:
            wout = fw[prod_cells] * prod_rates / fluid.rho_w
            np.subtract.at(src, prod_cells, wout)
            water_out += dt_s * float(np.sum(wout))
        s = s + dt_s * (src - div_w) / porevol
        over = np.clip(s - 1.0, 0.0, None)
        under = np.clip(-s, 0.0, None)
        clipped += float(np.sum((over + under) * porevol))
        s = np.clip(s, 0.0, 1.0)

    mass1 = float(np.sum(s * porevol))
    balance = mass1 - mass0 - (water_in - water_out)
    rel = abs(balance) / max(abs(water_in) + abs(water_out) + abs(mass0),
                             1e-300)
    return TwoPhaseState(s=s, time=state.time + dt,
                         clipped_volume=state.clipped_volume + clipped,
                         mass_error=rel, substeps=n_sub)


@dataclass
class TwoPhaseSeries:
    """Report-step records of a two-phase run."""

    steps: list = field(default_factory=list)
    times: list = field(default_factory=list)
    watercut: list = field(default_factory=list)
    e_s: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    mass_errors: list = field(default_factory=list)
    max_clipped: float = 0.0
    label: str = ""

    def max_e_s(self):
        vals = [e for e in self.e_s if np.isfinite(e)]
        return max(vals) if vals else np.nan


def run_twophase(grid, perm, fluid, wells, space=None, mode="mortar",
                 t_end=2500.0, dt=1.0, report_stride=50, smoothing=True,
                 reference=None, cfl_target=0.9, label="", progress=None):
    """Sequential pressure-transport loop.

    `mode="mortar"` solves pressure in the fixed `space`; `mode="fine"` runs
    the monolithic fine solve (the reference).  When a reference series is
    given, the relative saturation error is recorded at every report step.
    """
    if mode == "mortar" and space is None:
        raise ValueError("mortar mode needs an enriched mortar space")
    nsteps = int(round(t_end / dt))
    state = TwoPhaseState(s=np.zeros(grid.n_cells))
    series = TwoPhaseSeries(label=label)
    producers = wells.producers()
    prod_cells = np.array([w.cell for w in producers], dtype=np.int64)
    prod_weights = np.array([-w.rate for w in producers])
    prod_weights = prod_weights / prod_weights.sum()

    for step in range(1, nsteps + 1):
        if mode == "fine":
            lam_t, _ = frac_flow(state.s, fluid, count_clamps=False)
            coeff = fem.coeff_array(perm) * lam_t
            sol = fem.fine_reference_solve(
                grid, coeff, wells.integrated(grid) / grid.cell_volume)
            flux = sol.flux
        else:
            ms = pressure_step(grid, perm, space, state.s, wells, fluid,
                               smoothing=smoothing)
            flux = ms.flux
        state = transport_step(state, flux, wells, dt, grid, perm, fluid,
                               cfl_target=cfl_target)
        if step % report_stride == 0:
            _, fw_prod = frac_flow(state.s[prod_cells], fluid,
                                   count_clamps=False)
            wc = float(np.dot(np.atleast_1d(fw_prod), prod_weights))
            series.steps.append(step)
            series.times.append(state.time)
            series.watercut.append(wc)
            series.snapshots.append(state.s.copy())
            series.mass_errors.append(state.mass_error)
            series.max_clipped = max(series.max_clipped, state.clipped_volume)
            if reference is not None:
                idx = len(series.steps) - 1
                s_ref = reference.snapshots[idx]
                den = float(np.linalg.norm(s_ref))
                err = (float(np.linalg.norm(state.s - s_ref)) / den
                       if den > 0 else np.nan)
                series.e_s.append(err)
            else:
                series.e_s.append(np.nan)
            if progress:
                progress(step, state, series)
    return series
