from __future__ import annotations


class SfpsError(Exception):
    """Base class for package errors."""


class ShapeError(SfpsError, ValueError):
    pass


class ConfigError(SfpsError, ValueError):
    pass


class ProtocolError(SfpsError):
    """A message or call arrived out of the order the protocol allows."""


class NeedMoreBytes(SfpsError):
    """Raised by the frame decoder when the buffer holds an incomplete frame."""

    def __init__(self, needed: int):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


class EncodingError(SfpsError):
    pass


class TransportError(SfpsError):
    pass


class UnsupportedLayerError(SfpsError):
    pass


class ChecksumError(SfpsError):
    pass


class FormatError(SfpsError, ValueError):
    pass
