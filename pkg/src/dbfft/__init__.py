"""Displacement-based FFT homogenization on periodic voxel grids."""
from .errors import (
    ConfigError,
    ConjugateSymmetryError,
    ContractError,
    ConvergenceError,
    DBFFTError,
    GenerationError,
    InvalidGridError,
    InvertedElementError,
    NumericalBreakdownError,
    ParameterError,
    PhaseMapFormatError,
    PreconditionerError,
)
from .grid import Grid, TensorField, make_grid
from .linear_solver import LoadSpec, SmallStrainResult, SolveReport, pcg_solve, solve_small_strain
from .materials import J2Plastic, LinearElastic, MaterialSet, SaintVenantKirchhoff, isotropic_stiffness, make_material
from .microstructure import PhaseMap, load_phase_map, random_spheres, save_phase_map, sphere_inclusion
from .nonlinear import LoadPathResult, NewtonOptions, run_increment, run_load_path
from .residuals import ResidualTriple, compatibility_residual, equilibrium_residual, loading_residual, residual_triple
from .config import RunConfig, config_from_dict, parse_config

__version__ = "0.1.0"
