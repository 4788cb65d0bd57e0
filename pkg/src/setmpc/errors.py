"""Shared exception types."""


class ContractViolation(Exception):
    """An operation was called with arguments violating its contract, or a
    controller returned an input outside the certified set."""


class LabelAlignmentError(ValueError):
    """A goal/unsafe box boundary falls strictly inside a partition cell."""


class InfeasibleAmbiguitySet(RuntimeError):
    """Transition intervals admit no probability distribution (sum of upper
    bounds below 1), typically from over-aggressive pruning."""


class NonConvergence(RuntimeError):
    """Value iteration did not reach the tolerance within max_iters."""

    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"no convergence after {iterations} iterations, residual {residual:.3e}"
        )


class Infeasible(Exception):
    """A candidate cell sequence admits no consistent input assignment."""


class ConfigError(ValueError):
    """A benchmark config failed schema validation; the message carries the
    source file and line where known."""
