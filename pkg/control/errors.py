# control/errors.py
# Error types shared by every package. The controller maps each class to an
# exit code and a one-line machine-parsable message.
import re


class PoseAdaptError(Exception):
    """Base class for all errors raised on purpose by this project."""
    exit_code = 1

    @property
    def code(self) -> str:
        # CamelCase class name -> snake_case error code
        return re.sub(r"(?<!^)(?=[A-Z])", "_", type(self).__name__).lower()


class RejectedInputError(PoseAdaptError, ValueError):
    """Input to a pure function violates its preconditions."""


class ConfigError(PoseAdaptError, ValueError):
    """Rejected configuration (bad values, unknown keys, wrong version)."""


class DatasetError(PoseAdaptError):
    """Missing or corrupt dataset file; the message always names the file."""
    exit_code = 3


class CheckpointError(PoseAdaptError):
    """Checkpoint integrity, version or skeleton mismatch."""
    exit_code = 3


class NonFiniteLossError(PoseAdaptError, FloatingPointError):
    """A loss term became NaN/inf; `term` names the offending component."""
    exit_code = 4

    def __init__(self, term: str, value=None):
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term '{term}' (value={value})")


class RefusalError(PoseAdaptError):
    """Command refused to overwrite existing output without --force."""
    exit_code = 2
