"""Exception hierarchy shared by all modules."""


class SigFPError(Exception):
    """Base class for package errors."""


class ConfigError(SigFPError):
    """Invalid configuration or mismatched dimensions."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = ""
        if field is not None:
            where = f"{field}: "
        if line is not None:
            where = f"line {line}: " + where
        super().__init__(where + message)


class UsageError(SigFPError):
    """An API was called with arguments violating its preconditions."""


class DataError(SigFPError):
    """Malformed input data (non-increasing times, bad CSV rows, ...)."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(SigFPError):
    """Optimisation failure: NaN gradients or divergence."""

    def __init__(self, message, stage=None, step=None, trace=None):
        self.stage = stage
        self.step = step
        self.trace = trace
        ctx = []
        if stage is not None:
            ctx.append(f"stage={stage}")
        if step is not None:
            ctx.append(f"step={step}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)


class SimulationError(SigFPError):
    """Non-finite state encountered while stepping the discretised system."""

    def __init__(self, message, stage=None, time_index=None, n1=None, n2=None):
        self.stage = stage
        self.time_index = time_index
        self.n1 = n1
        self.n2 = n2
        super().__init__(
            f"{message} (stage={stage}, t_index={time_index}, n1={n1}, n2={n2})"
        )


class InternalError(SigFPError):
    """Broken internal invariant (ragged ensembles etc.)."""
