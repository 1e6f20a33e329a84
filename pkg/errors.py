"""Exception hierarchy. Every error knows the exit code the CLI returns for it."""


class PinsarError(Exception):
    exit_code = 1


class ConfigurationError(PinsarError, ValueError):
    exit_code = 2


class DimensionError(ConfigurationError):
    """Shapes that cannot be combined."""


class ContractError(PinsarError, ValueError):
    """A caller broke an operation's precondition."""
    exit_code = 2


class DataError(PinsarError):
    """Unreadable, truncated or inconsistent data/checkpoint files."""
    exit_code = 3


class UnlabeledDatasetError(ContractError):
    exit_code = 3


class NumericalAbort(PinsarError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, step=None, lr=None, history=None):
        super().__init__(message)
        self.step = step
        self.lr = lr
        self.history = list(history or [])

    def __str__(self):
        base = super().__str__()
        tail = ", ".join(f"{v:.6g}" for v in self.history[-10:])
        return f"{base} (step={self.step}, lr={self.lr}, recent loss=[{tail}])"


class AcceptanceError(PinsarError):
    """Experiment finished but missed one or more acceptance thresholds."""
    exit_code = 5

    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__("; ".join(self.failures))
