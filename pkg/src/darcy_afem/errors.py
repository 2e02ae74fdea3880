"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised for invalid user-facing configuration (degrees, flags, parameters)."""


class StructuralError(RuntimeError):
    """Raised when internal data structures are inconsistent (stale state, bad topology)."""


class MeshError(StructuralError):
    """Raised for invalid mesh input or a failed refinement."""


class SolverError(RuntimeError):
    """Raised when a linear solve cannot deliver a usable solution."""
