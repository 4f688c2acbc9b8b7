"""Self-supervised dense correspondence between deformable triangle meshes.

The pipeline: decimate and normalize a pair of meshes, compute spectral
bases, multi-scale local descriptors, and geodesic distance matrices; then
train a small shared-weight refinement network whose features induce a
pair of soft correspondence maps, optimized so that mapping every point
forward and back preserves pairwise geodesic distances.
"""

from .errors import (
    CacheError,
    ExportError,
    CheckpointError,
    ConfigError,
    CycleMapError,
    DecimationError,
    EigenSolveError,
    InvalidMeshError,
    MeshLoadError,
    NonFiniteError,
    SolveError,
)
from .mesh import MeshReport, TriMesh, normalize_unit_area, validate
from .meshio import load_mesh, save_mesh

__version__ = "0.1.0"

__all__ = [
    "TriMesh",
    "MeshReport",
    "validate",
    "normalize_unit_area",
    "load_mesh",
    "save_mesh",
    "CycleMapError",
    "MeshLoadError",
    "InvalidMeshError",
    "DecimationError",
    "EigenSolveError",
    "SolveError",
    "NonFiniteError",
    "CacheError",
    "ExportError",
    "CheckpointError",
    "ConfigError",
    "__version__",
]
