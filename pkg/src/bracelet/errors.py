"""Exception types raised across the package."""


class BraceletError(Exception):
    """Base class for every error raised by this package."""


class InvalidConfigurationError(BraceletError, ValueError):
    pass


class MalformedFrameError(BraceletError, ValueError):
    pass


class UnsupportedVersionError(BraceletError, ValueError):
    pass


class DegenerateCalibrationError(BraceletError, ValueError):
    pass


class ImplausibleFitError(BraceletError, ValueError):
    """The fitted path-loss exponent fell outside the plausible band."""

    def __init__(self, exponent: float, pl0_db: float):
        super().__init__(
            f"fitted path-loss exponent {exponent:.4f} outside (0.5, 8.0)"
        )
        self.exponent = exponent
        self.pl0_db = pl0_db


class RejectedSampleError(BraceletError, ValueError):
    pass


class ConsentDeniedError(BraceletError, PermissionError):
    pass


class NothingToUploadError(BraceletError, LookupError):
    pass


class DuplicateUploadError(BraceletError, ValueError):
    pass


class MalformedPayloadError(BraceletError, ValueError):
    pass


class CorruptPayloadError(BraceletError, ValueError):
    pass


class InvalidRiskError(BraceletError, ValueError):
    pass


class ClockInconsistencyError(BraceletError, ValueError):
    pass


class ScenarioValidationError(BraceletError, ValueError):
    """Raised with every problem found in a scenario, not just the first."""

    def __init__(self, problems: list):
        self.problems = list(problems)
        super().__init__("invalid scenario:\n" + "\n".join(
            f"  - {p}" for p in self.problems))
