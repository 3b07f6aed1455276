"""Exception hierarchy shared by every maskproof module.

Each class carries the CLI exit code used when it escapes a command.
"""


class MaskProofError(Exception):
    """Base class for all maskproof failures."""

    exit_code = 4


class DataError(MaskProofError):
    """Inputs are malformed, out of range or inconsistent."""

    exit_code = 3


class VerificationError(MaskProofError):
    """Evidence did not verify."""

    exit_code = 1


# fixed_point
class RangeOverflow(DataError):
    pass


# constraint_system
class Finalized(MaskProofError):
    pass


class Unsatisfiable(DataError):
    pass


class LengthMismatch(DataError):
    pass


# masking / training
class DimMismatch(DataError):
    pass


class KindMismatch(DataError):
    pass


class RoundSkew(DataError):
    pass


class NonBinaryLabel(DataError):
    pass


class OverlappingRows(DataError):
    pass


class UnknownOwner(DataError):
    pass


class EmptyEffectiveSet(DataError):
    pass


# commitments
class EmptyVector(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


# circuits
class BadShape(DataError):
    pass


class SlotOverflow(DataError):
    pass


# randomness
class MalformedKey(DataError):
    pass


class ZeroModulus(DataError):
    pass


class BadBatchSize(DataError):
    pass


# forgery_lab
class BadParams(DataError):
    pass


class NoCandidates(DataError):
    pass


class NoSameClassNeighbor(DataError):
    pass


# protocol
class MissingSignature(VerificationError):
    pass


class BadSignature(VerificationError):
    pass


class ScheduleVerifyFailed(VerificationError):
    pass


class TranscriptFormatError(DataError):
    pass
