"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors are handled by the parser
(exit 1), ValidationError and subclasses exit 2, NumericError and
CheckpointError exit 3 along with any other runtime failure.
"""


class ValidationError(ValueError):
    """Bad configuration or bad input values (pre-condition violations)."""


class ShapeError(ValidationError):
    """Array shape incompatible with the declared geometry."""


class NumericError(RuntimeError):
    """Non-finite values encountered where finiteness is a contract.

    Carries enough context (layer index, sampler step, training step) to
    locate the blow-up without a debugger.
    """

    def __init__(self, message: str, *, layer: int | None = None, step: int | None = None):
        parts = [message]
        if layer is not None:
            parts.append(f"layer={layer}")
        if step is not None:
            parts.append(f"step={step}")
        super().__init__(" ".join(parts))
        self.layer = layer
        self.step = step


class CheckpointError(RuntimeError):
    """Checkpoint version or manifest mismatch; message contains the diff."""
