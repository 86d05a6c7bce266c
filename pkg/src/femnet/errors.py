"""Exception types shared across the package."""


class FemnetError(Exception):
    """Base class for all errors raised by femnet."""


class DegenerateInput(FemnetError):
    """Point set cannot be triangulated (too few points or all collinear)."""


class DegenerateCell(FemnetError):
    """Cell has (near-)zero area."""


class EmptyMesh(FemnetError):
    """An operation removed every cell from the mesh."""


class IsolatedNode(FemnetError):
    """A node belongs to no cell."""


class ShapeMismatch(FemnetError):
    """Array shapes are inconsistent with the operation."""


class GraphNotRecorded(FemnetError):
    """backward() was called on a value with no recorded computation."""


class NonFiniteOutput(FemnetError):
    """A NaN or Inf appeared in a computed value."""


class TransportAbsent(FemnetError):
    """The model has no transport term but one was requested."""


class MaxNfeExceeded(FemnetError):
    """The ODE solver exceeded its derivative-evaluation budget."""


class StepUnderflow(FemnetError):
    """The adaptive step size collapsed below the resolvable scale."""


class InvalidSpec(FemnetError):
    """A synthetic data specification is inconsistent."""


class KTooLarge(FemnetError):
    """Requested more medoids than there are points."""


class ZeroVariance(FemnetError):
    """A feature has zero variance over the training split."""
