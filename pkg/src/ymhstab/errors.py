"""Exception types raised by the library."""


class YMHError(Exception):
    """Base class for all library errors."""


class NonConvergence(YMHError):
    """Newton iteration failed to reach the requested tolerance."""


class DomainTooSmall(YMHError):
    """Truncation radius too small for the exponential far-field decay."""


class WindowUnderflow(YMHError):
    """1-U or 1-V hit machine precision inside the fitting window."""


class OutOfRange(YMHError):
    """Query point outside the tabulated interval."""


class GridMismatch(YMHError):
    """Arrays do not live on the expected grid."""


class EigenNonConvergence(YMHError):
    """Iterative eigensolver did not converge."""


class ValidationGap(YMHError):
    """Iterative and dense eigenvalues disagree beyond tolerance."""


class SolvabilityDefect(YMHError):
    """Right-hand side is not orthogonal to the kernel."""


class DomainBoundary(YMHError):
    """Parameter at or beyond the end of (0, pi/2)."""


class OutsideTube(YMHError):
    """Normal offset outside the Fermi tube."""


class BadIndex(YMHError):
    """Jacobi field index outside 1..6."""


class ShapeMismatch(YMHError):
    """One-form component vectors have the wrong shape."""


class BoundaryNonzero(YMHError):
    """Normal field does not vanish on the truncation boundary."""


class DegreeUnsupported(YMHError):
    """Only degree-one profiles are supported here."""


class StencilMargin(YMHError):
    """Evaluation point too close to the grid edge for the stencil."""


class SupportLeak(YMHError):
    """Perturbation does not vanish at the grid boundary."""


class InsufficientLadder(YMHError):
    """Convergence study needs at least three resolutions."""


class ConfigInvalid(YMHError):
    """Experiment configuration failed validation."""


class PipelineFailure(YMHError):
    """A pipeline stage raised; the message carries the stage context."""
