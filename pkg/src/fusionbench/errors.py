"""Exception types shared across fusionbench.

Each class carries the CLI exit code it maps to, so the front end can
translate failures without string matching.
"""


class FusionBenchError(Exception):
    exit_code = 1


class ShapeError(FusionBenchError, ValueError):
    """Array dimensions disagree with a declared geometry."""

    exit_code = 2


class SchemaError(FusionBenchError, ValueError):
    """A config, manifest or checkpoint failed validation."""

    exit_code = 2

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class PrerequisiteError(FusionBenchError):
    """A training step was requested before the artifact it depends on exists."""

    exit_code = 3


class DivergenceError(FusionBenchError, FloatingPointError):
    """A loss or parameter update became non-finite during training."""

    exit_code = 4

    def __init__(self, where, step, value, what="loss"):
        self.where = where
        self.step = step
        self.value = value
        super().__init__(f"{where}: non-finite {what} {value!r} at step {step}")
