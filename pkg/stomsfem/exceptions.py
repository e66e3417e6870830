class InvalidGridError(ValueError):
    """Raised when a domain or grid specification cannot produce a nested mesh pair."""
    pass


class EllipticityError(ValueError):
    """Raised when a coefficient field is not strictly positive."""
    pass


class NonPSDKernelError(Exception):
    """Raised when a covariance Gram matrix has eigenvalues below the PSD tolerance."""
    pass


class SolverNotConverged(Exception):
    """Raised when a linear solve misses its residual tolerance."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class OutOfRangeError(Exception):
    """Raised when a local parameter point lies outside a surrogate's box."""

    def __init__(self, message: str, patch_id=None, point=None):
        super().__init__(message)
        self.patch_id = patch_id
        self.point = point


class UnsupportedModelError(Exception):
    """Raised when a surrogate cannot represent the requested field model."""
    pass


class NotSPDError(Exception):
    """Raised when a reduced system matrix fails its Cholesky factorization."""
    pass


class IncompleteAssemblyError(Exception):
    """Raised when the coarse assembly is missing a local contribution."""
    pass


class GridMismatchError(Exception):
    """Raised when an online collocation node has no offline counterpart."""
    pass


class MissingArtifactError(Exception):
    """Raised when an online-only run cannot find its offline artifacts."""
    pass


class ConfigError(Exception):
    """Raised when an experiment configuration fails validation."""
    pass
