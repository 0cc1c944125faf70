"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class DegenerateGeometryError(ArithmeticError):
    """Pose registration has no unique solution (coincident or collapsed anchors)."""


class ConfigError(ValueError):
    """A run configuration failed validation."""


class FormatError(ValueError):
    """A dataset, checkpoint or report file is malformed."""
