"""
Exception hierarchy. Everything raised on purpose by this package derives from
`EgnError`, so the command line can turn it into an exit code.
"""
from typing import List, Optional, Sequence

__all__ = (
    "EgnError",
    "DimensionError",
    "ContractError",
    "DeterminismError",
    "NonFiniteError",
    "ConfigError",
    "DataError",
    "InsufficientExemplarsError",
    "DegenerateInputError",
    "CheckpointError",
    "MissingArtifactError",
    "RunLockedError",
)


class EgnError(Exception):
    "Base class."


class DimensionError(EgnError, ValueError):
    """
    Shapes of the operands don't fit together.
    """


class ContractError(EgnError):
    """
    A precondition of an operation has been violated by the caller.
    """


class DeterminismError(EgnError):
    """
    Two evaluations of a closure that should be deterministic disagree.
    """


class NonFiniteError(EgnError, FloatingPointError):
    """
    A NaN or infinity showed up.

    :param where: Human readable location, e.g. "epoch 3, step 12" or
        "layer 2".
    """

    def __init__(self, message: str, where: Optional[str] = None) -> None:
        super().__init__(message)
        self.where = where


class ConfigError(EgnError):
    """
    Invalid configuration. All problems are collected, not only the first.
    """

    def __init__(self, problems: Sequence[str]) -> None:
        self.problems: List[str] = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(EgnError):
    """
    Input data is malformed. The message names the offending record or line.
    """


class InsufficientExemplarsError(EgnError):
    """
    Fewer eligible (cross-patient) entries than exemplars requested.
    """

    def __init__(self, eligible: int, k: int) -> None:
        super().__init__(
            f"Only {eligible} eligible exemplars from other patients, need k={k}."
        )
        self.eligible = eligible
        self.k = k


class DegenerateInputError(EgnError, ValueError):
    """
    Input for which the requested quantity is undefined, e.g. a zero vector
    under the cosine distance.
    """


class CheckpointError(EgnError):
    """
    A binary artifact has the wrong magic, version, or is truncated.
    """


class MissingArtifactError(EgnError):
    """
    An upstream artifact doesn't exist yet.

    :param path: The missing file.
    :param command: The `egn` subcommand that produces it.
    """

    def __init__(self, path: str, command: str) -> None:
        super().__init__(f"Missing {path!r}. Run `egn {command}` first.")
        self.path = path
        self.command = command


class RunLockedError(EgnError):
    """
    Another command owns the output directory.
    """
