"""Batch experiment front-end: config files, convergence tables, two-phase
runs, and the CSV/VTK emitters.

Config files are INI-style with sections [grid], [perm], [source], [online],
[twophase], [contrast] and [output]; all physical defaults live here rather
than in code paths.  Outputs are byte-deterministic for a fixed config and
seed.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import fem, fields, mortar, online, twophase
from .geometry import build_grids


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the key path."""


def _fmt(x):
    return repr(float(x))


# ------------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    extents: tuple = (1.0, 1.0)
    blocks: tuple = (10, 10)
    fine: int = 10
    perm_source: str = "model1"       # model1 | uniform | loguniform | file
    contrast: float = 1e4
    perm_path: str = ""
    perm_layout: str = "ascii"
    porosity: float = fields.DEFAULT_POROSITY
    seed: int = 0
    log_lo: float = 1.0
    log_hi: float = 1e4
    source_kind: str = "corners"
    source_magnitude: float = 4.0
    offline: int = 1
    levels: int = 5
    cases: tuple = ("1",)
    residual_tol: float = 0.0
    drop_tol: float = 1e-10
    contrast_sweep: tuple = ()
    # two-phase block
    mu_w: float = 1.0
    mu_o: float = 5.0
    exp_w: float = 2.0
    exp_o: float = 2.0
    injection_rate: float = 1.0
    dt: float = 1.0
    t_end: float = 2500.0
    report_stride: int = 50
    smoothing: bool = True
    cfl: float = 0.9
    variants: tuple = ("1+1", "1+3")
    out_dir: str = "out"
    raw: dict = dc_field(default_factory=dict, repr=False)


def _get(cp, section, key, cast, default, path_errors):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    try:
        return cast(raw)
    except Exception:
        path_errors.append(f"{section}.{key}={raw!r}")
        return default


def _floats(raw):
    return tuple(float(x) for x in raw.split())


def _ints(raw):
    return tuple(int(x) for x in raw.split())


def _bool(raw):
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def load_config(path):
    """Parse and validate an experiment config file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    errs = []
    cfg = ExperimentConfig(
        extents=_get(cp, "grid", "extents", _floats, (1.0, 1.0), errs),
        blocks=_get(cp, "grid", "blocks", _ints, (10, 10), errs),
        fine=_get(cp, "grid", "fine", int, 10, errs),
        perm_source=_get(cp, "perm", "source", str, "model1", errs),
        contrast=_get(cp, "perm", "contrast", float, 1e4, errs),
        perm_path=_get(cp, "perm", "path", str, "", errs),
        perm_layout=_get(cp, "perm", "layout", str, "ascii", errs),
        porosity=_get(cp, "perm", "porosity", float,
                      fields.DEFAULT_POROSITY, errs),
        seed=_get(cp, "perm", "seed", int, 0, errs),
        log_lo=_get(cp, "perm", "lo", float, 1.0, errs),
        log_hi=_get(cp, "perm", "hi", float, 1e4, errs),
        source_kind=_get(cp, "source", "kind", str, "corners", errs),
        source_magnitude=_get(cp, "source", "magnitude", float, 4.0, errs),
        offline=_get(cp, "online", "offline", int, 1, errs),
        levels=_get(cp, "online", "levels", int, 5, errs),
        cases=_get(cp, "online", "cases", lambda r: tuple(r.split()),
                   ("1",), errs),
        residual_tol=_get(cp, "online", "residual_tol", float, 0.0, errs),
        drop_tol=_get(cp, "online", "drop_tol", float, 1e-10, errs),
        contrast_sweep=_get(cp, "contrast", "sweep", _floats, (), errs),
        mu_w=_get(cp, "twophase", "mu_w", float, 1.0, errs),
        mu_o=_get(cp, "twophase", "mu_o", float, 5.0, errs),
        exp_w=_get(cp, "twophase", "exp_w", float, 2.0, errs),
        exp_o=_get(cp, "twophase", "exp_o", float, 2.0, errs),
        injection_rate=_get(cp, "twophase", "injection_rate", float, 1.0, errs),
        dt=_get(cp, "twophase", "dt", float, 1.0, errs),
        t_end=_get(cp, "twophase", "t_end", float, 2500.0, errs),
        report_stride=_get(cp, "twophase", "report_stride", int, 50, errs),
        smoothing=_get(cp, "twophase", "smoothing", _bool, True, errs),
        cfl=_get(cp, "twophase", "cfl", float, 0.9, errs),
        variants=_get(cp, "twophase", "variants",
                      lambda r: tuple(r.split()), ("1+1", "1+3"), errs),
        out_dir=_get(cp, "output", "directory", str, "out", errs),
    )
    if errs:
        raise ConfigError("bad config values: " + ", ".join(errs))
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if len(cfg.extents) != len(cfg.blocks):
        raise ConfigError("grid.extents and grid.blocks disagree in length")
    if cfg.fine < 2 or any(b < 2 for b in cfg.blocks):
        raise ConfigError("grid.blocks and grid.fine must be at least 2")
    if cfg.perm_source not in ("model1", "uniform", "loguniform", "file"):
        raise ConfigError(f"perm.source={cfg.perm_source!r} unknown")
    if cfg.perm_source == "file" and not os.path.exists(cfg.perm_path):
        raise ConfigError(f"perm.path={cfg.perm_path!r} does not exist")
    for c in cfg.cases:
        if c not in ("1", "a", "b"):
            raise ConfigError(f"online.cases entry {c!r} not in 1/a/b")
    for v in cfg.variants:
        if v != "snapshot":
            parts = v.split("+")
            if len(parts) != 2 or not all(p.isdigit() for p in parts):
                raise ConfigError(
                    f"twophase.variants entry {v!r} is not k+m or snapshot")
    if cfg.dt <= 0 or cfg.t_end <= 0 or cfg.report_stride < 1:
        raise ConfigError("twophase time controls must be positive")
    return cfg


def build_problem(cfg):
    """Grid, permeability field and elliptic source from a config."""
    grid = build_grids(cfg.extents, cfg.blocks, cfg.fine)
    perm = make_perm(cfg, grid)
    if cfg.source_kind != "corners":
        raise ConfigError(f"source.kind={cfg.source_kind!r} unknown")
    f = fem.corner_source(grid, cfg.source_magnitude)
    return grid, perm, f


def make_perm(cfg, grid, contrast=None):
    eta = cfg.contrast if contrast is None else contrast
    if cfg.perm_source == "model1":
        return fields.model1_like_field(grid, contrast=eta,
                                        porosity=cfg.porosity)
    if cfg.perm_source == "uniform":
        return fields.uniform_field(grid, porosity=cfg.porosity)
    if cfg.perm_source == "loguniform":
        return fields.log_uniform_field(grid, cfg.log_lo, cfg.log_hi,
                                        seed=cfg.seed, porosity=cfg.porosity)
    if cfg.perm_source == "file":
        f = fields.load_raw_field(cfg.perm_path, dims=grid.fine_counts,
                                  layout=cfg.perm_layout,
                                  porosity=cfg.porosity)
        return fields.field_for_grid(f, grid)
    raise ConfigError(f"perm.source={cfg.perm_source!r} unknown")


# ---------------------------------------------------------------------- CSV

def write_csv(path, header, rows):
    """Deterministic CSV: header row plus repr-formatted floats."""
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [str(v) if isinstance(v, (int, np.integer)) else _fmt(v)
                     for v in row]
            fh.write(",".join(cells) + "\n")
    return path


# ---------------------------------------------------------------------- VTK

def write_vtk(path, grid, scalars=None, vectors=None):
    """Legacy structured-points file with cell data, 17-significant-digit
    ASCII formatting."""
    dims3 = tuple(grid.fine_counts) + (1,) * (3 - grid.dim)
    h3 = tuple(grid.h) + (1.0,) * (3 - grid.dim)
    n = grid.n_cells
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write("# vtk DataFile Version 3.0\n")
            fh.write("mortarflow cell fields\n")
            fh.write("ASCII\n")
            fh.write("DATASET STRUCTURED_POINTS\n")
            fh.write("DIMENSIONS %d %d %d\n" % tuple(d + 1 for d in dims3))
            fh.write("ORIGIN 0 0 0\n")
            fh.write("SPACING %.17g %.17g %.17g\n" % h3)
            fh.write("CELL_DATA %d\n" % n)
            for name, data in (scalars or {}).items():
                fh.write("SCALARS %s double\n" % name)
                fh.write("LOOKUP_TABLE default\n")
                for v in np.asarray(data, dtype=float):
                    fh.write("%.17g\n" % v)
            for name, data in (vectors or {}).items():
                arr = np.asarray(data, dtype=float)
                if arr.shape[1] < 3:
                    arr = np.hstack([arr, np.zeros((arr.shape[0],
                                                    3 - arr.shape[1]))])
                fh.write("VECTORS %s double\n" % name)
                for row in arr:
                    fh.write("%.17g %.17g %.17g\n" % tuple(row))
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc
    return path


def read_vtk_cells(path):
    """Minimal reader for files produced by write_vtk (round-trip checks)."""
    scalars, vectors = {}, {}
    dims = None
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = 0
    n = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("DIMENSIONS"):
            dims = tuple(int(x) - 1 for x in line.split()[1:])
        elif line.startswith("CELL_DATA"):
            n = int(line.split()[1])
        elif line.startswith("SCALARS"):
            name = line.split()[1]
            vals = [float(x) for x in lines[i + 2:i + 2 + n]]
            scalars[name] = np.array(vals)
            i += 1 + n
        elif line.startswith("VECTORS"):
            name = line.split()[1]
            vals = [[float(x) for x in l.split()]
                    for l in lines[i + 1:i + 1 + n]]
            vectors[name] = np.array(vals)
            i += n
        i += 1
    return dims, scalars, vectors


# -------------------------------------------------------------- experiments

_CASE_LABEL = {"1": "case1", "a": "casea", "b": "caseb"}


def convergence_rows(cfg, grid, perm, f):
    """Enrichment histories for each requested case, merged into table rows."""
    histories = {}
    for case in cfg.cases:
        config = online.EnrichmentConfig(
            max_levels=cfg.levels, offline_k=cfg.offline, case=case,
            residual_tol=cfg.residual_tol, drop_tol=cfg.drop_tol)
        histories[case] = online.enrichment_loop(grid, perm, f, config)
    nrows = min(h.levels for h in histories.values())
    rows = []
    for l in range(nrows):
        row = [l, cfg.offline + l, histories[cfg.cases[0]].dofs[l]]
        for case in cfg.cases:
            row += [histories[case].e_p[l], histories[case].e_u[l]]
        rows.append(row)
    header = ["level", "Nb", "dof"]
    for case in cfg.cases:
        header += ["ep_" + _CASE_LABEL[case], "eu_" + _CASE_LABEL[case]]
    return header, rows, histories


def run_convergence_table(cfg, out_dir=None):
    """Error-decay table per oversampling case, optionally swept over
    contrast orders; one CSV per contrast value."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    grid, base_perm, f = build_problem(cfg)
    sweep = cfg.contrast_sweep or (None,)
    paths = []
    summary = []
    for eta in sweep:
        perm = base_perm if eta is None else make_perm(cfg, grid, contrast=eta)
        header, rows, _ = convergence_rows(cfg, grid, perm, f)
        name = ("converge.csv" if eta is None
                else f"converge_eta{eta:g}.csv")
        path = os.path.join(out_dir, name)
        write_csv(path, header, rows)
        paths.append(path)
        last = rows[-1]
        summary.append(f"{name}: levels={len(rows) - 1} "
                       + " ".join(f"{h}={_fmt(v)}"
                                  for h, v in zip(header[3:], last[3:])))
    with open(os.path.join(out_dir, "converge_summary.txt"), "w") as fh:
        fh.write("\n".join(summary) + "\n")
    return paths, summary


def _variant_space(label, cfg, grid, coeff0, f_density):
    if label == "snapshot":
        return mortar.full_skeleton_space(grid)
    k, m = (int(p) for p in label.split("+"))
    config = online.EnrichmentConfig(max_levels=m, offline_k=k,
                                     case=cfg.cases[0],
                                     drop_tol=cfg.drop_tol)
    hist = online.enrichment_loop(grid, coeff0, f_density, config)
    return hist.space


def run_twophase_experiment(cfg, out_dir=None):
    """Reference plus mortar-space variants; per-variant time-series CSV and
    saturation VTK snapshots, with a final-error summary."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    grid = build_grids(cfg.extents, cfg.blocks, cfg.fine)
    perm = make_perm(cfg, grid)
    fluid = twophase.FluidModel(mu_w=cfg.mu_w, mu_o=cfg.mu_o,
                                exp_w=cfg.exp_w, exp_o=cfg.exp_o)
    wells = twophase.WellSet.five_spot(grid, cfg.injection_rate)
    f_density = wells.integrated(grid) / grid.cell_volume
    lam0, _ = twophase.frac_flow(0.0, fluid, count_clamps=False)
    coeff0 = perm.kappa * lam0

    reference = twophase.run_twophase(
        grid, perm, fluid, wells, mode="fine", t_end=cfg.t_end, dt=cfg.dt,
        report_stride=cfg.report_stride, cfl_target=cfg.cfl, label="reference")

    paths = []
    summary = []
    logk = np.log10(perm.kappa)
    for label in cfg.variants:
        space = _variant_space(label, cfg, grid, coeff0, f_density)
        series = twophase.run_twophase(
            grid, perm, fluid, wells, space=space, mode="mortar",
            t_end=cfg.t_end, dt=cfg.dt, report_stride=cfg.report_stride,
            smoothing=cfg.smoothing, reference=reference,
            cfl_target=cfg.cfl, label=label)
        safe = label.replace("+", "p")
        csv_path = os.path.join(out_dir, f"twophase_{safe}.csv")
        rows = [[s, t, wm, wr, es] for s, t, wm, wr, es in
                zip(series.steps, series.times, series.watercut,
                    reference.watercut, series.e_s)]
        write_csv(csv_path, ["step", "time", "watercut_ms", "watercut_ref",
                             "e_s"], rows)
        paths.append(csv_path)
        for idx, step in enumerate(series.steps):
            vtk_path = os.path.join(out_dir, f"sat_{safe}_step{step:06d}.vtk")
            write_vtk(vtk_path, grid,
                      scalars={"s": series.snapshots[idx], "log10_kappa": logk})
        summary.append((label, series.e_s[-1], series.max_e_s()))
    ref_csv = os.path.join(out_dir, "twophase_reference.csv")
    write_csv(ref_csv, ["step", "time", "watercut_ref"],
              [[s, t, w] for s, t, w in zip(reference.steps, reference.times,
                                            reference.watercut)])
    paths.append(ref_csv)
    lines = [f"{label}: final_e_s={_fmt(e)} max_e_s={_fmt(m)}"
             for label, e, m in summary]
    with open(os.path.join(out_dir, "twophase_summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return paths, summary, reference


def run_reference(cfg, out_dir=None):
    """Monolithic fine solve of the configured elliptic problem, written as a
    VTK file with pressure, velocity and log-permeability."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    grid, perm, f = build_problem(cfg)
    sol = fem.fine_reference_solve(grid, perm, f)
    path = os.path.join(out_dir, "reference.vtk")
    write_vtk(path, grid,
              scalars={"p": sol.p, "log10_kappa": np.log10(perm.kappa)},
              vectors={"u": sol.velocity()})
    return path, sol


def run_fieldgen(cfg, out_dir=None, specfile=None):
    """Generate a permeability field (config-driven or from a box specfile)
    and write it in ASCII layout."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    grid = build_grids(cfg.extents, cfg.blocks, cfg.fine)
    if specfile:
        perm = field_from_specfile(grid, specfile)
    else:
        perm = make_perm(cfg, grid)
    path = os.path.join(out_dir, "field.txt")
    fields.save_field(perm, path, layout="ascii")
    return path, perm


def field_from_specfile(grid, path):
    """Channel-field specfile: [field] section with background, contrast and
    either model1=true or one `box = x0 x1 y0 y1` line per feature."""
    if not os.path.exists(path):
        raise ConfigError(f"field specfile not found: {path}")
    cp = configparser.ConfigParser()
    cp.read(path)
    if not cp.has_section("field"):
        raise ConfigError(f"{path}: missing [field] section")
    background = _get(cp, "field", "background", float, 1.0, [])
    contrast = _get(cp, "field", "contrast", float, 1e4, [])
    if cp.has_option("field", "model1") and _bool(cp.get("field", "model1")):
        boxes = fields.model1_like_boxes(grid)
    else:
        raw = cp.get("field", "box", fallback="")
        boxes = []
        for line in raw.splitlines():
            vals = [int(x) for x in line.split()]
            if not vals:
                continue
            if len(vals) != 2 * grid.dim:
                raise ConfigError(f"field.box line {line!r} needs "
                                  f"{2 * grid.dim} integers")
            boxes.append(fields.ChannelBox(tuple(vals[0::2]),
                                           tuple(vals[1::2])))
    try:
        return fields.generate_channel_field(grid, boxes, background,
                                             contrast)
    except fields.FieldFormatError as exc:
        raise ConfigError(f"field spec invalid: {exc}") from exc
