"""Exception hierarchy shared by every stage of the calibration pipeline."""

from __future__ import annotations


class CalibrationError(Exception):
    """Base class for all errors raised by tofcalib."""


class PointBehindCamera(CalibrationError):
    pass


class NoConvergence(CalibrationError):
    pass


class DegenerateConfiguration(CalibrationError):
    pass


class NumericalFailure(CalibrationError):
    pass


class GridIncomplete(CalibrationError):
    pass


class InsufficientInliers(CalibrationError):
    pass


class PlaneFitFailed(CalibrationError):
    """Planarization could not produce a board plane for an image.

    Callers are expected to fall back to the raw per-corner depths.
    """


class RayParallelToPlane(CalibrationError):
    pass


class NegativeIntersection(CalibrationError):
    pass


class RejectionExhausted(CalibrationError):
    pass


class SubsetTooLarge(CalibrationError):
    pass


class MissingGroundtruth(CalibrationError):
    pass


class ParseError(CalibrationError):
    pass


class SchemaVersionMismatch(ParseError):
    pass
