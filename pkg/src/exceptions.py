"""
Exception hierarchy for the GiVE toolkit.
"""
from typing import Any, Optional


class GiveError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(GiveError):
    """Operand shapes do not fit together."""

    def __init__(self, op: str, *shapes: Any):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class ContractError(GiveError):
    """A precondition of an operation was violated."""


class NonFiniteError(GiveError):
    """NaN or Inf produced where finite values are required."""


class VocabularyError(GiveError):
    """A word is missing from the vocabulary."""

    def __init__(self, word: str):
        self.word = word
        super().__init__(f"Out-of-vocabulary word: {word!r}")


class ConfigurationError(GiveError):
    """Invalid combination of settings."""


class GenerationError(GiveError):
    """Scene generation could not satisfy its placement constraints."""


class SamplingError(GiveError):
    """No candidate left to sample from."""


class CorruptCheckpointError(GiveError):
    """Checkpoint file failed validation."""

    def __init__(self, path: Any, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"Corrupt checkpoint {path}: {reason}")


class MetricError(GiveError):
    """A metric is undefined for the given inputs."""


class FrozenParameterError(GiveError):
    """A frozen tensor received a gradient or an update."""


class DivergenceError(GiveError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, last_good: Optional[Any] = None, reason: str = "non-finite loss"):
        self.step = step
        self.last_good = last_good
        self.reason = reason
        super().__init__(f"Training diverged at step {step} ({reason})")

