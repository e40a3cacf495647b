"""Exception hierarchy shared by the pipeline stages."""

from __future__ import annotations


class XraySeqError(Exception):
    """Base class for all pipeline errors."""


class MissingColumn(XraySeqError):
    pass


class UnknownLabel(XraySeqError):
    pass


class MalformedRow(XraySeqError):
    pass


class DuplicateFollowup(XraySeqError):
    pass


class TooFewRecords(XraySeqError):
    pass


class EmptyInput(XraySeqError):
    pass


class SchemaMismatch(XraySeqError):
    pass


class ManifestValidationError(XraySeqError):
    pass


class DecodeError(XraySeqError):
    pass


class UnknownBackbone(XraySeqError):
    pass


class ConfigError(XraySeqError):
    pass


class ShapeMismatch(XraySeqError):
    pass


class NumericalError(XraySeqError):
    pass


class VersionMismatch(XraySeqError):
    pass


class LengthMismatch(XraySeqError):
    pass


class DegenerateClasses(XraySeqError):
    pass
