"""Multiscale mortar mixed finite-element flow solver with residual-driven
online basis enrichment, oversampling, and a sequential two-phase
flow-and-transport simulator verified against a built-in fine-scale solver.
"""

from .geometry import (GridHierarchy, CoarseEdge, Region, build_grids,
                       neighborhood, oversample_region, region_for_case,
                       color_classes, separated_edges)
from .fields import (PermField, ChannelBox, generate_channel_field,
                     load_raw_field, save_field, uniform_field,
                     model1_like_field, log_uniform_field, FieldFormatError)
from .fem import (SubdomainSystem, FineHybridSystem, FineSolution,
                  assemble_subdomain, solve_dirichlet, solve_source,
                  flux_trace, assemble_fine_hybrid, fine_reference_solve,
                  corner_source, divergence_residual, velocity_from_flux,
                  whole_domain_region, SolverError)
from .mortar import (MortarSpace, SkeletonAssembly, MultiscaleSolution,
                     InterfaceOperator, offline_basis, full_skeleton_space,
                     assemble_interface, project_interface, solve_interface,
                     recover_solution, residual_on_skeleton, errors)
from .online import (EnrichmentConfig, EnrichmentHistory, OnlineCandidate,
                     online_basis_local, online_basis_oversampled,
                     enrich_space, enrichment_loop, convergence_diagnostics)
from .twophase import (FluidModel, Well, WellSet, TwoPhaseState,
                       TwoPhaseSeries, frac_flow, pressure_step,
                       jacobi_smooth, transport_step, run_twophase)

__version__ = "0.1.0"
