"""Exception hierarchy shared by every subsystem."""


class FedFTNError(Exception):
    """Base class for all package errors."""


class ShapeError(FedFTNError, ValueError):
    pass


class ContractError(FedFTNError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class DomainError(FedFTNError, ValueError):
    pass


class ConfigError(FedFTNError, ValueError):
    pass


class ProtocolError(FedFTNError):
    pass


class TransportError(FedFTNError, IOError):
    """Retriable failure of the message transport."""


class DecodeError(FedFTNError, ValueError):
    """Malformed wire bytes.  ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
