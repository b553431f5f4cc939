"""Exception types shared across the pipeline."""


class ContractViolation(ValueError):
    """An operation was called with inputs violating its contract
    (shape/channel/role mismatch, empty input where forbidden, ...)."""


class ConfigError(ValueError):
    """Config file failed validation (unknown key, bad value)."""


class MissingPrerequisite(RuntimeError):
    """A stage was invoked before its predecessors produced their outputs."""

    def __init__(self, artifact: str):
        super().__init__(f"missing prerequisite artifact: {artifact}")
        self.artifact = artifact


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; the last checkpoint was saved."""

    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint
