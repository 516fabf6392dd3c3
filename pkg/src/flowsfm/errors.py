"""Shared error types."""


class DegenerateInputError(ValueError):
    """Input is structurally unusable (collinear clouds, coincident
    trajectories, too few correspondences). The CLI maps this to exit 2."""


class OptimizerDivergedError(RuntimeError):
    """The loss became non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic
