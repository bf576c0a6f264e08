"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: config/usage problems
exit 2, data ingest problems exit 3, numeric failures exit 4.
"""


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Backward-pass contract violation (non-scalar loss, detached loss, ...)."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the pipeline requires finite math."""


class PoisonedStepError(NumericError):
    """An optimizer step saw a non-finite gradient; the step was aborted."""


class EmptyBatchError(ValueError):
    """An operation that needs at least one sample received none."""


class LabelError(ValueError):
    """A label or one-hot row is outside the declared class scheme."""


class MetricError(ValueError):
    """A metric was requested over an empty sample set."""


class IngestError(OSError):
    """An image or dataset file could not be read or decoded."""

    def __init__(self, path, reason=""):
        self.path = str(path)
        msg = f"cannot ingest {self.path}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class AttributeCoverageError(ValueError):
    """No manifest record carries the requested attribute."""


class ManifestError(ValueError):
    """A manifest / attribute-list file does not follow its wire format."""


class CheckpointError(ValueError):
    """Base class for checkpoint container problems."""


class CheckpointFormatError(CheckpointError):
    """Corrupt magic, truncation, or malformed checkpoint payload."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class ConfigError(ValueError):
    """Invalid run configuration (bad flag combination, unknown key, ...)."""
