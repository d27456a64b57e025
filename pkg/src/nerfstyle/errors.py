"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented process exit codes (2 config, 3 data, 4 numeric).
"""


class NerfStyleError(Exception):
    exit_code = 1


class ConfigError(NerfStyleError):
    exit_code = 2


class SetupError(ConfigError):
    """A required external resource (e.g. pretrained weights) is missing."""


class DependencyError(ConfigError):
    """A pipeline stage was started without the artifacts it depends on."""


class CheckpointMismatchError(ConfigError):
    pass


class DataError(NerfStyleError):
    exit_code = 3


class FormatError(DataError):
    pass


class UnsupportedCameraModelError(DataError):
    def __init__(self, model):
        self.model = model
        super().__init__(
            f"unsupported COLMAP camera model {model!r}; only PINHOLE and SIMPLE_PINHOLE are handled"
        )


class DegenerateSceneError(DataError):
    pass


class CorruptCheckpointError(DataError, CheckpointMismatchError):
    """Stored content hash does not match the checkpoint's arrays."""


class NumericError(NerfStyleError):
    exit_code = 4


class InvariantViolationError(NerfStyleError):
    exit_code = 4


class ShapeError(NerfStyleError, ValueError):
    exit_code = 2


class DomainError(NerfStyleError, ValueError):
    exit_code = 2
