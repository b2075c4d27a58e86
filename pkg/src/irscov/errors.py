"""Exception types shared across the package.

Argument-level misuse (shape mismatches, out-of-domain scalars) raises plain
ValueError at the offending call site; the classes here mark failures that a
caller may reasonably want to catch and route (bad config files, geostatistical
degeneracies, diverged training, refused problem sizes).
"""


class ConfigurationError(ValueError):
    """A config file, scene file, or CLI argument set is invalid.

    The message names the offending key path or field.
    """


class ArtifactError(OSError):
    """A required input artifact is missing or malformed."""


class SelectionError(RuntimeError):
    """A geostatistical stage cannot proceed (no pairs, too few bins, ...)."""


class TrainingDivergedError(RuntimeError):
    """SGD diverged and did not recover within the allowed restarts."""


class InstanceTooLargeError(RuntimeError):
    """A brute-force routine refused an instance above its size guard."""


class StageFailure(RuntimeError):
    """A pipeline stage failed; `stage` names it, `__cause__` has the error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
