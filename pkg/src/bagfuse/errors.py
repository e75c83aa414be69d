"""Exception taxonomy shared across the package.

Every error carries a short ``category`` tag that the CLI prints as
``error[<category>]: ...`` so failures are machine-greppable.
"""


class BagfuseError(Exception):
    category = "error"


class ShapeError(BagfuseError):
    """Incompatible tensor/array shapes."""

    category = "shape"


class LabelError(BagfuseError):
    """A class label outside the valid range."""

    category = "label"


class ContractError(BagfuseError):
    """An API precondition was violated by the caller."""

    category = "contract"


class FormatError(BagfuseError):
    """A serialized artifact could not be decoded."""

    category = "format"


class SplitError(BagfuseError):
    """A dataset cannot be split as requested."""

    category = "split"


class PartitionError(BagfuseError):
    """Class groups that do not partition the label set."""

    category = "partition"


class BuildError(BagfuseError):
    """A network description that cannot be materialized."""

    category = "build"


class DivergenceError(BagfuseError):
    """Training produced a non-finite loss."""

    category = "divergence"

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class ConfigError(BagfuseError):
    """A bad or missing experiment-configuration entry."""

    category = "config"


class CheckpointError(BagfuseError):
    """A checkpoint that is missing, truncated, or incompatible."""

    category = "checkpoint"
