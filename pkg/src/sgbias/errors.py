"""Exception types shared across the package."""


class SgbiasError(Exception):
    """Base class for package-specific failures."""


class ConfigError(SgbiasError):
    """Invalid, unknown, or inconsistent configuration input."""


class DataError(SgbiasError):
    """Dataset or checkpoint files missing, malformed, or inconsistent."""


class EmptySceneError(DataError):
    """An operation that needs at least one entity received none."""


class GenerationError(SgbiasError):
    """Scene synthesis could not satisfy its placement constraints."""


class DivergenceError(SgbiasError):
    """Training produced a non-finite loss."""
