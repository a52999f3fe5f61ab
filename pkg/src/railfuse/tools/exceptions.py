"""Exceptions raised across railfuse.

Input problems also derive from ``ValueError`` so callers that only guard
against bad arguments keep working.
"""


class RailfuseError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(RailfuseError, ValueError):
    """Invalid or unknown configuration value."""


class DomainError(RailfuseError, ValueError):
    """Argument outside the domain of a projection or model."""


class RepreintegrationRequired(RailfuseError):
    """Bias update too large for the first-order correction."""

    def __init__(self, dba_norm, dbg_norm):
        self.dba_norm = dba_norm
        self.dbg_norm = dbg_norm
        super().__init__(
            f"bias change too large for first-order correction "
            f"(|dba|={dba_norm:.3e}, |dbg|={dbg_norm:.3e})"
        )


class BedNotFound(RailfuseError):
    """Too few points in the track-bed band of a down-view scan."""


class LineFitFailed(RailfuseError):
    """RANSAC could not fit a rail line with enough support."""

    def __init__(self, side, message):
        self.side = side
        super().__init__(f"{side} rail: {message}")


class PlaneDegenerate(RailfuseError):
    """Rail points do not span a plane."""


class UnobservableAlignment(RailfuseError):
    """GNSS/odometry alignment baseline too short or too few pairs."""


class RegistrationRejected(RailfuseError):
    """ICP finished with a residual above the acceptance bound."""

    def __init__(self, rms, bound):
        self.rms = rms
        self.bound = bound
        super().__init__(f"registration rejected: rms {rms:.3f} m > {bound:.3f} m")


class TooFewMatches(RailfuseError, ValueError):
    """Not enough time-matched poses for trajectory metrics."""


class ExportError(RailfuseError, OSError):
    """Writing an artifact failed; carries the offending path."""

    def __init__(self, path, cause):
        self.path = str(path)
        super().__init__(f"failed to write {self.path}: {cause}")
