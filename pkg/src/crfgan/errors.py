"""Exception hierarchy shared across the package."""


class CrfGanError(Exception):
    """Base class for all package errors."""


class ParameterError(CrfGanError, ValueError):
    pass


class FormatError(CrfGanError):
    """Missing or unparseable metadata / checkpoint manifest."""


class IntegrityError(CrfGanError):
    """File contents disagree with their declared metadata."""


class GeometryError(CrfGanError, ValueError):
    pass


class GraphError(CrfGanError, ValueError):
    """A tensor does not satisfy a network's shape contract."""


class CapacityError(CrfGanError):
    pass


class NumericError(CrfGanError, ArithmeticError):
    pass


class FingerprintError(CrfGanError):
    """Feature sets or checkpoints built from different extractors/graphs."""
