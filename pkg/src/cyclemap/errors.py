"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1, data
problems (files, formats, incompatible inputs) exit 2, numerical failures
exit 3.
"""


class CycleMapError(Exception):
    """Base class for all cyclemap errors."""


class MeshLoadError(CycleMapError):
    """A mesh file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = str(path)
            if line is not None:
                loc += f":{line}"
            loc = f" [{loc}]"
        super().__init__(f"{message}{loc}")
        self.path = path
        self.line = line


class InvalidMeshError(CycleMapError):
    """Mesh data violates a structural invariant (bad index, degenerate face)."""


class DecimationError(CycleMapError):
    """Edge-collapse simplification cannot proceed."""


class EigenSolveError(CycleMapError):
    """The generalized eigensolver failed to converge or was misused."""


class SolveError(CycleMapError):
    """A linear solve hit a numerically singular system."""


class NonFiniteError(CycleMapError):
    """A loss or gradient became NaN/Inf."""


class CacheError(CycleMapError):
    """Preprocessing cache file is corrupt or incompatible."""


class ExportError(CycleMapError):
    """A matrix or point-map export file is malformed."""


class CheckpointError(CycleMapError):
    """Checkpoint file is corrupt, truncated, or incompatible."""


class ConfigError(CycleMapError):
    """Invalid configuration value or combination."""
