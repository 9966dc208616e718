"""Exception hierarchy shared by every zonetrain module.

Errors are split into data errors (bad inputs, files, layouts) and compute
errors (shape problems, empty training sets); the CLI maps the two families
to distinct exit codes.
"""


class ZoneTrainError(Exception):
    """Base class for all toolkit errors."""


class DataError(ZoneTrainError):
    pass


class ComputeError(ZoneTrainError):
    pass


# geometry
class GridOverflow(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class InvalidZone(DataError):
    pass


class IndexOutOfRange(DataError, IndexError):
    pass


# datapipe
class InsufficientFrames(DataError):
    pass


# model / trainer / evalkit
class ShapeUnderflow(ComputeError):
    pass


class UnknownSize(ComputeError):
    pass


class EmptyDataset(ComputeError):
    pass


class ZonePurityViolation(ComputeError):
    pass


class ChannelMismatch(ComputeError):
    pass


class UncoveredDepth(DataError):
    pass


# ingest
class NetworkError(DataError):
    pass


class DigestMismatch(DataError):
    pass


class StorageError(DataError):
    pass


class BadMagic(DataError):
    pass


class VersionUnsupported(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class LayoutMismatch(DataError):
    pass
