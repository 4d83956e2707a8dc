"""Exception taxonomy shared by all planlab modules."""


class PlanLabError(Exception):
    """Base class for all planlab errors."""


class ConfigError(PlanLabError):
    """A generator or experiment configuration violates its documented ranges."""


class GenerationError(PlanLabError):
    """A randomized generator exhausted its retry budget."""


class ContractError(PlanLabError):
    """A caller violated an operation's precondition."""


class GuardError(PlanLabError):
    """An input exceeds a feasibility guard (e.g. too many relations to enumerate)."""


class EncodingError(PlanLabError):
    """A plan cannot be expressed in the environment's current action space."""


class CalibrationError(PlanLabError):
    """A calibration window is degenerate (too small or zero range)."""


class FormatError(PlanLabError):
    """A persisted file is malformed or truncated."""


class VersionError(PlanLabError):
    """A persisted file carries an unsupported format version."""


class FingerprintError(PlanLabError):
    """A checkpoint was created for a different environment configuration."""
