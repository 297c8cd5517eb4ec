"""Typed errors raised by the synthct library.

Every error carries the process exit code the command line reports for it, so
handlers can re-raise library errors unchanged and let the entry point map them.
"""
from typing import Optional


class SynthCTError(Exception):
    """Base class for all library errors."""
    exit_code = 1


# --- invalid input (exit 2) ---

class InvalidInputError(SynthCTError, ValueError):
    exit_code = 2


class InvalidGrid(InvalidInputError):
    pass


class UnitMismatch(InvalidInputError):
    pass


class ShapeMismatch(InvalidInputError):
    pass


class CropTooLarge(InvalidInputError):
    pass


class InvalidConfig(InvalidInputError):
    pass


class UnknownConfigKey(InvalidConfig):
    def __init__(self, key_path: str):
        super().__init__(f"Unknown configuration key: {key_path}")
        self.key_path = key_path


class SpecInfeasible(InvalidInputError):
    pass


class ModeInputMissing(InvalidInputError):
    pass


class TooFewSamples(InvalidInputError):
    pass


class PriorInconsistent(InvalidInputError):
    pass


# --- malformed or missing files (exit 3) ---

class FormatError(SynthCTError):
    exit_code = 3


class VolumeFormatError(FormatError):
    pass


class BadMagic(VolumeFormatError):
    pass


class TruncatedPayload(VolumeFormatError):
    pass


class BadUnits(VolumeFormatError):
    pass


class ContainerFormatError(FormatError):
    pass


class ManifestError(FormatError):
    pass


class DuplicateRecord(ManifestError):
    pass


class MissingPair(ManifestError):
    pass


class BadRole(ManifestError):
    pass


class EmptyManifest(ManifestError):
    pass


class NiftiFormatError(FormatError):
    pass


class BadNiftiMagic(NiftiFormatError):
    pass


class UnsupportedDatatype(NiftiFormatError):
    pass


class CompressedInput(NiftiFormatError):
    pass


# --- empty regions (exit 4) ---

class EmptyRegionError(SynthCTError):
    exit_code = 4


class EmptyBody(EmptyRegionError):
    pass


class EmptyMask(EmptyRegionError):
    pass


class EmptySoftMask(EmptyMask):
    pass


class AllGroupsEmpty(EmptyMask):
    pass


# --- calibration (exit 5) ---

class CalibrationError(SynthCTError):
    exit_code = 5


class EmptyCalibration(CalibrationError):
    pass


class Infeasible(CalibrationError):
    """CRC condition cannot hold even with zero empirical risk."""

    def __init__(self, message: str, min_n_c: Optional[int] = None, min_patients: Optional[int] = None):
        super().__init__(message)
        self.min_n_c = min_n_c
        self.min_patients = min_patients


class SaturatedEverywhere(CalibrationError):
    def __init__(self, message: str, min_n_c: int):
        super().__init__(message)
        self.min_n_c = min_n_c


# --- provenance (exit 6) ---

class ProvenanceError(SynthCTError):
    exit_code = 6


class DigestMismatch(ProvenanceError):
    pass


class MethodPayloadMismatch(ProvenanceError):
    pass
