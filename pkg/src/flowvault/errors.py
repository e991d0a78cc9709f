"""Exception hierarchy shared by every layer of the archive."""


class FlowVaultError(Exception):
    """Base class for archive errors."""


class PcapFormatError(FlowVaultError, ValueError):
    """The input is not a readable microsecond pcap stream."""


class IntegrityError(FlowVaultError):
    """Stored bytes failed a structural or checksum test."""

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{message} (location {location})")
        self.location = location


class DataUnavailableError(FlowVaultError):
    """Referenced data was evicted or never made durable."""

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{message} (location {location})")
        self.location = location


class StorageError(FlowVaultError):
    """A tier could not be written."""


class UsageError(FlowVaultError):
    """An API was called in a state that does not allow it."""
