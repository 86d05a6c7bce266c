"""femnet: continuous-time forecasting on triangle meshes.

The model estimates the instantaneous effect of unknown dynamics on every
mesh cell with small MLPs, turns those estimates into per-node derivatives
through precomputed P1 finite-element inner products and a lumped mass
matrix, and integrates the result with an adaptive ODE solver.  A transport
variant adds a convection term whose per-cell velocity estimates are
directly interpretable as a flow field.
"""

from .data import Dataset, SyntheticSpec, generate_synthetic, read_dataset, write_dataset
from .dynamics import DirichletMask, FenModel, build_model, load_model, save_model, time_derivative
from .fem import LumpedMass, MeshArtifacts, lumped_mass
from .mesh import CellGeometry, Mesh, PointCloud, compute_geometry, delaunay_triangulate, filter_sliver_cells
from .odeint import SolverConfig, Trajectory, dopri5_solve, solve_with_gradients
from .training import EvalReport, TrainConfig, evaluate, l1_loss, super_resolution_eval, train

__version__ = "0.1.0"

__all__ = [
    "CellGeometry", "Dataset", "DirichletMask", "EvalReport", "FenModel",
    "LumpedMass", "Mesh", "MeshArtifacts", "PointCloud", "SolverConfig",
    "SyntheticSpec", "TrainConfig", "Trajectory", "build_model",
    "compute_geometry", "delaunay_triangulate", "dopri5_solve", "evaluate",
    "filter_sliver_cells", "generate_synthetic", "l1_loss", "load_model",
    "lumped_mass", "read_dataset", "save_model", "solve_with_gradients",
    "super_resolution_eval", "time_derivative", "train", "write_dataset",
    "__version__",
]
