"""Exception hierarchy.

Every failure the pipeline can report derives from :class:`VesselForgeError`;
the CLI prints the class name as the machine-readable error code.
"""


class VesselForgeError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# maskgrid / file format
class LengthMismatch(VesselForgeError, ValueError):
    pass


class BadMagic(VesselForgeError, ValueError):
    pass


class UnsupportedVersion(VesselForgeError, ValueError):
    pass


class TruncatedPayload(VesselForgeError, ValueError):
    pass


# elastic
class InvalidParam(VesselForgeError, ValueError):
    pass


class DimsMismatch(VesselForgeError, ValueError):
    pass


# treeprune / synthgen
class EmptySeeds(VesselForgeError, ValueError):
    pass


class InvalidGraph(VesselForgeError, ValueError):
    pass


class OutOfExtent(VesselForgeError, ValueError):
    pass


class TooShallow(VesselForgeError, ValueError):
    pass


# classeval
class DegenerateTrainSet(VesselForgeError, ValueError):
    pass


class DimMismatch(VesselForgeError, ValueError):
    pass


class SingleClass(VesselForgeError, ValueError):
    pass


class InsufficientCases(VesselForgeError, ValueError):
    pass


# pipeline
class NonOriginalInput(VesselForgeError, ValueError):
    pass


class MissingGraph(VesselForgeError, ValueError):
    pass


class InvalidManifest(VesselForgeError, ValueError):
    pass


class IoError(VesselForgeError, OSError):
    pass


class FoldLeakage(VesselForgeError, RuntimeError):
    pass
