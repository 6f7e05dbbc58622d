class ConfigError(ValueError):
    """Invalid experiment or generator configuration."""


class EstimatorError(RuntimeError):
    """An estimator solve did not converge."""

    def __init__(self, message: str, grad_norm: float = float("nan")):
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


class EnumerationBudgetError(RuntimeError):
    """Exact slate enumeration would exceed the configured budget.

    Use ``slate_argmax_greedy`` (position-greedy fill) for large corpora.
    """
