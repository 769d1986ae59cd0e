"""Exception hierarchy shared by all modules.

Exit-code mapping used by the CLI: ConfigError -> 2, AssumptionError and
subclasses -> 3, every other ConeEmbedError -> 1.
"""


class ConeEmbedError(Exception):
    """Base class for all package errors."""


class ConfigError(ConeEmbedError):
    """Malformed or incomplete configuration / input file."""


class ResolutionError(ConeEmbedError):
    """Grid resolution outside the supported range for the requested operation."""


class AtlasMismatchError(ConeEmbedError):
    """Operands live on different atlases."""


class AssumptionError(ConeEmbedError):
    """A model assumption (convexity, NEC, decay, ...) is violated."""


class ConvexityError(AssumptionError):
    """P(h,h) <= 0 or tr h <= 0 where positivity is required.

    Carries the offending chart/point indices when available.
    """

    def __init__(self, msg, points=None):
        super().__init__(msg)
        self.points = points


class InconsistentSectionError(AssumptionError):
    """A pointwise sign/classification is not constant over the sphere."""


class CausticError(AssumptionError):
    """Null expansion hit zero during leaf propagation."""

    def __init__(self, msg, s=None, points=None):
        super().__init__(msg)
        self.s = s
        self.points = points


class DomainError(ConeEmbedError):
    """A point left the annulus (or another admissible set)."""


class StarShapeError(ConeEmbedError):
    """Pullback metric lost positive-definiteness (map not star-shaped)."""


class TrustRegionError(ConeEmbedError):
    """An iterate left the trust region / annulus and backtracking failed."""


class DivergenceError(ConeEmbedError):
    """Fixed-point iteration diverged (norm growth over the patience window)."""


class DiscretizationError(ConeEmbedError):
    """Discrete operator failed a structural test (e.g. kernel dimension)."""


class NumericalError(ConeEmbedError):
    """Linear or nonlinear solve failure with diagnostics attached."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


class ExtensionError(ConeEmbedError):
    """Path continuation stopped before the requested parameter value."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report
