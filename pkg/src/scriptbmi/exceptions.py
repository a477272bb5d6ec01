"""Exception types raised across the package."""


class ScriptBMIError(Exception):
    pass


class ShapeError(ScriptBMIError, ValueError):
    pass


class RangeError(ScriptBMIError, ValueError):
    pass


class LabelError(ScriptBMIError, ValueError):
    pass


class InputError(ScriptBMIError, ValueError):
    pass


class DataError(ScriptBMIError, ValueError):
    pass


class DivergenceError(ScriptBMIError, ArithmeticError):
    def __init__(self, epoch, step, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


class ConfigError(ScriptBMIError, ValueError):
    pass


class ParameterError(ScriptBMIError, ValueError):
    pass


class ChannelError(ScriptBMIError, ValueError):
    pass


class FormatError(ScriptBMIError, ValueError):
    pass


class ManifestError(ScriptBMIError, ValueError):
    pass


class ValidationError(ManifestError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class CompatibilityError(ScriptBMIError, ValueError):
    pass


class EmptySegmentationWarning(UserWarning):
    pass


class StratificationWarning(UserWarning):
    pass


class BMIMismatchWarning(UserWarning):
    pass
