class InvalidInput(ValueError):
    """Arguments violate an operation's preconditions."""


class SimulationError(RuntimeError):
    """A path simulation produced a non-finite state."""


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite or runaway loss or gradient.

    ``snapshot`` carries whatever diagnostics the raiser had at hand
    (epoch, component losses, parameter norms, offending index).
    """

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
