"""Exception hierarchy shared across the package.

Data/format problems and compatibility problems are kept distinct because the
command line maps them to different exit codes (3 and 4).
"""


class VesselTrackError(Exception):
    """Base class for all package-specific errors."""


class FormatError(VesselTrackError):
    """A file is not valid in its declared format (corrupt header, bad field,
    truncated payload, checksum mismatch)."""


class VersionError(FormatError):
    """A file declares a format version this code does not understand."""


class ShapeError(VesselTrackError):
    """A stored tensor's shape disagrees with the architecture that owns it."""


class CompatibilityError(VesselTrackError):
    """Two otherwise valid artifacts cannot be used together
    (e.g. weights trained for a different direction-grid size)."""


class NoExitError(VesselTrackError):
    """A query sphere does not intersect the centerline tree."""


class VesselNotFoundError(VesselTrackError):
    """No tracked point lies near enough to a requested vessel selection."""
