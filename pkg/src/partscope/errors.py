"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: config errors exit 2, data/parse errors
exit 3, divergence exits 4.
"""


class PartscopeError(Exception):
    pass


class DimensionError(PartscopeError, ValueError):
    """Operand shapes do not agree (channels, vector length)."""


class GeometryError(PartscopeError, ValueError):
    """A window, grid or image is too small or does not divide evenly."""


class ConfigError(PartscopeError, ValueError):
    pass


class DataError(PartscopeError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class StateError(PartscopeError, RuntimeError):
    pass


class ContractError(PartscopeError, ValueError):
    pass


class DivergenceError(PartscopeError, RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss!r}")
        self.step = step
        self.loss = loss
