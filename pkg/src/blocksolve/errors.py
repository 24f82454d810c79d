"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A run configuration violates a precondition; the message names the field."""


class ProtocolError(RuntimeError):
    """A communication-protocol invariant was violated (deadlock, mismatch...)."""


class SolverBreakdownError(RuntimeError):
    """An inner solver broke down inside a block worker."""

    def __init__(self, block_id: int, outer_iteration: int, detail: str):
        super().__init__(
            f"inner solver breakdown in block {block_id} "
            f"at outer iteration {outer_iteration}: {detail}"
        )
        self.block_id = block_id
        self.outer_iteration = outer_iteration
