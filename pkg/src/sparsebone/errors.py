"""Exception hierarchy shared by every module."""


class SparseBoneError(Exception):
    pass


class DuplicateCoordinate(SparseBoneError, ValueError):
    pass


class ShapeMismatch(SparseBoneError, ValueError):
    pass


class SupportMismatch(SparseBoneError, ValueError):
    pass


class EmptyTensor(SparseBoneError, ValueError):
    pass


class MissingCache(SparseBoneError, RuntimeError):
    pass


class InvalidConfig(SparseBoneError, ValueError):
    pass


class DepthExceedsExtent(SparseBoneError, ValueError):
    pass


class LabelOutOfRange(SparseBoneError, ValueError):
    pass


class InvalidProbability(SparseBoneError, ValueError):
    pass


class DegenerateStats(SparseBoneError, ValueError):
    pass


class UncoveredVoxel(SparseBoneError, RuntimeError):
    pass


class OccupancyExceeded(SparseBoneError, ValueError):
    pass


# file formats


class FormatError(SparseBoneError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass


class ManifestMissing(FormatError):
    pass


class SizeMismatch(FormatError):
    pass


class UnknownKind(FormatError):
    pass


class UnsupportedDatatype(FormatError):
    pass


class UnsupportedDim(FormatError):
    pass
