"""Command-line front-end.

Subcommands: `converge` (error-decay tables), `twophase` (flow-and-transport
series), `reference` (monolithic fine solve), `fieldgen` (permeability field
files).  Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import sys

from . import experiments, fields, parallel
from .experiments import ConfigError
from .fem import SolverError


def _common(parser):
    parser.add_argument("--config", required=True, help="experiment INI file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for parallel assembly maps")
    parser.add_argument("--perm", default=None,
                        help="permeability field file (overrides config)")
    parser.add_argument("--perm-gen", default=None,
                        help="channel-field specfile (overrides config)")


def build_parser():
    p = argparse.ArgumentParser(
        prog="mortarflow",
        description="multiscale mortar flow solver experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("converge", "enrichment error-decay tables"),
                        ("twophase", "two-phase flow and transport series"),
                        ("reference", "monolithic fine reference solve"),
                        ("fieldgen", "generate a permeability field file")):
        _common(sub.add_parser(name, help=help_))
    return p


def _apply_overrides(cfg, args):
    if args.perm:
        cfg.perm_source = "file"
        cfg.perm_path = args.perm
        experiments.validate_config(cfg)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    parallel.set_threads(args.threads)
    try:
        cfg = experiments.load_config(args.config)
        cfg = _apply_overrides(cfg, args)
        out = args.out or cfg.out_dir
        if args.command == "converge":
            paths, summary = experiments.run_convergence_table(cfg, out)
            for line in summary:
                print(line)
            print("wrote: " + " ".join(paths))
        elif args.command == "twophase":
            paths, summary, _ = experiments.run_twophase_experiment(cfg, out)
            for label, final, worst in summary:
                print(f"{label}: final_e_s={final:.6g} max_e_s={worst:.6g}")
            print("wrote: " + " ".join(paths))
        elif args.command == "reference":
            path, sol = experiments.run_reference(cfg, out)
            print(f"wrote {path}; pressure range "
                  f"[{sol.p.min():.6g}, {sol.p.max():.6g}]")
        elif args.command == "fieldgen":
            path, perm = experiments.run_fieldgen(cfg, out,
                                                  specfile=args.perm_gen)
            print(f"wrote {path}; kappa range "
                  f"[{perm.kappa.min():.6g}, {perm.kappa.max():.6g}]")
    except (ConfigError, fields.FieldFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, ValueError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
