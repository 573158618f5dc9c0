"""Exception hierarchy.

Everything raised deliberately by the library derives from
:class:`VirtDomainError`; the CLI maps :class:`ConfigError` to exit code 1
and the rest to exit code 2.
"""


class VirtDomainError(Exception):
    pass


class ConfigError(VirtDomainError, ValueError):
    """Invalid parameter or configuration value."""


class InputShapeError(VirtDomainError, ValueError):
    pass


class InvalidValueError(VirtDomainError, ValueError):
    """NaN/Inf where finite numbers are required."""


class InvalidDistributionError(VirtDomainError, ValueError):
    pass


class DegenerateDatasetError(VirtDomainError, ValueError):
    pass


class DegenerateClassifierError(VirtDomainError, ValueError):
    def __init__(self, class_index):
        super().__init__(f"classifier row {class_index} is all zeros; cannot normalize")
        self.class_index = class_index


class DegeneratePrototypeError(VirtDomainError, ValueError):
    pass


class UnsupportedSpecError(VirtDomainError, ValueError):
    pass


class TabularParseError(VirtDomainError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class SchemaError(VirtDomainError, ValueError):
    pass


class NumericalError(VirtDomainError, ArithmeticError):
    pass


class DivergenceError(VirtDomainError, ArithmeticError):
    def __init__(self, message, step=None, **losses):
        detail = ", ".join(f"{k}={v!r}" for k, v in losses.items())
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"{message}{where}" + (f" ({detail})" if detail else ""))
        self.step = step
        self.losses = losses


class SourceLeakError(VirtDomainError, RuntimeError):
    """Source data still reachable when adaptation starts."""


class StageError(VirtDomainError):
    """Wraps an error raised inside one pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
