"""Exception types shared across the package."""


class ContactNewtonError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(ContactNewtonError, ValueError):
    """Operands have incompatible shapes."""


class NotSPDError(ContactNewtonError):
    """A matrix expected to be symmetric positive definite is not.

    Usually signals bad material or mass parameters (non-positive mass,
    negative stiffness, zero time step).
    """


class DegenerateTetError(ContactNewtonError, ValueError):
    """A tetrahedron has non-positive signed volume in the rest configuration."""


class NonFiniteForceError(ContactNewtonError, ValueError):
    """An assembled force vector contains NaN or infinity."""


class InvalidAttachmentError(ContactNewtonError, ValueError):
    """A proximity attachment references a missing mesh entity."""


class DegenerateFrameError(ContactNewtonError):
    """No contact normal can be determined for a proximity pair."""


class SingularBlockError(ContactNewtonError):
    """A per-group diagonal block of the compliance matrix is not invertible."""


class ParseError(ContactNewtonError, ValueError):
    """A scene, mesh, or spec file could not be parsed."""


class ValidationError(ContactNewtonError, ValueError):
    """A parsed configuration violates an invariant."""
