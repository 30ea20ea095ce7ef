"""Exception hierarchy shared by every hcpn module."""


class HCPNError(Exception):
    """Base class for all errors raised by hcpn."""


class DimensionError(HCPNError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HCPNError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(HCPNError, ValueError):
    """Model or run configuration is inconsistent."""


class CorruptStateError(HCPNError, FloatingPointError):
    """A non-finite value appeared inside a recorded computation."""


class SpecError(HCPNError, ValueError):
    """A synthetic scene description cannot be rendered."""


class FormatError(HCPNError, IOError):
    """A file on disk does not match its declared format.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class VerificationError(HCPNError):
    """A manifest or gradient verification did not pass."""
