"""Exception types shared across the package."""


class BlockpredError(Exception):
    """Base class for all package-specific errors."""


class ParseError(BlockpredError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ValidationError(BlockpredError):
    """Parsed data violates a structural invariant."""


class ConfigError(BlockpredError):
    """A configuration value is out of its allowed range."""


class LengthError(BlockpredError):
    """Two sequences that must agree in length do not."""


class EmptyError(BlockpredError):
    """An operation received an empty input it cannot handle."""


class InsufficientDataError(BlockpredError):
    """A scenario is too short to produce any observation window."""


class EmptyClassError(BlockpredError):
    """Balancing requires at least one element of each class."""


class FractionError(BlockpredError):
    """Split fractions do not sum to one."""


class ShapeError(BlockpredError):
    """An array has the wrong dimensions."""


class BackendError(BlockpredError):
    """An external backend is unreachable, timed out, or misbehaved."""


class FeatureExtractionError(BlockpredError):
    """Per-frame feature extraction failed; carries the frame identity."""

    def __init__(self, scenario_id: str, seq_index: int, cause: Exception):
        super().__init__(
            f"feature extraction failed for scenario {scenario_id!r}, "
            f"seq_index {seq_index}: {cause}"
        )
        self.scenario_id = scenario_id
        self.seq_index = seq_index


class EmptySplitError(BlockpredError):
    """Training requires non-empty train and validation sets."""


class DivergenceError(BlockpredError):
    """Training loss became non-finite."""


class ConfigMismatchError(BlockpredError):
    """Input dimensions do not match the checkpoint's model config."""


class MissingSplitError(BlockpredError):
    """A checkpoint has no matching dataset split to evaluate on."""
