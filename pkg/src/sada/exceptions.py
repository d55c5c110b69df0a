"""
Exception hierarchy for sada.

Exception tree:
    SadaError (base)
    ├── SadaShapeError
    ├── SadaContractError
    │   └── SadaValidationError
    ├── SadaArtifactError
    │   └── SadaArchitectureError
    ├── SadaTrainingError
    └── SadaDataError

Every class carries an ``exit_code`` that the CLI returns when the error
escapes a command.
"""

from typing import Optional


class SadaError(Exception):
    """Base exception for all sada errors.

    Attributes:
        message: Human-readable error message
        suggestion: Suggested action to resolve the error
    """

    exit_code = 1

    def __init__(
        self,
        message: str,
        suggestion: Optional[str] = None
    ) -> None:
        self.message = message
        self.suggestion = suggestion
        super().__init__(self._format_message())

    def _format_message(self) -> str:
        """Format error message with suggestion if available."""
        if self.suggestion:
            return f"{self.message}\n\nSuggestion: {self.suggestion}"
        return self.message


class SadaShapeError(SadaError):
    """Raised when tensor extents are incompatible with an operation.

    Attributes:
        shapes: The offending shapes, in argument order
    """

    def __init__(
        self,
        message: str,
        shapes: Optional[list[tuple[int, ...]]] = None,
        suggestion: Optional[str] = None
    ) -> None:
        self.shapes = shapes or []
        super().__init__(message, suggestion)


class SadaContractError(SadaError):
    """Raised when a precondition of an operation does not hold.

    Attributes:
        parameter: The argument that broke the contract, if known
    """

    exit_code = 2

    def __init__(
        self,
        message: str,
        parameter: Optional[str] = None,
        suggestion: Optional[str] = None
    ) -> None:
        self.parameter = parameter
        super().__init__(message, suggestion)


class SadaValidationError(SadaContractError):
    """Raised when a user-supplied value fails validation.

    Attributes:
        parameter: The parameter that failed validation
        valid_values: List of valid values if applicable
    """

    def __init__(
        self,
        message: str,
        parameter: Optional[str] = None,
        valid_values: Optional[list] = None,
        suggestion: Optional[str] = None
    ) -> None:
        self.valid_values = valid_values

        if suggestion is None and valid_values:
            suggestion = f"Valid values for '{parameter}': {valid_values}"

        super().__init__(message, parameter=parameter, suggestion=suggestion)


class SadaArtifactError(SadaError):
    """Raised when a SADT tensor or SACK checkpoint cannot be decoded.

    Attributes:
        path: File the artifact was read from, if any
    """

    exit_code = 4

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        suggestion: Optional[str] = None
    ) -> None:
        self.path = path
        super().__init__(message, suggestion)


class SadaArchitectureError(SadaArtifactError):
    """Raised when a checkpoint does not fit the network it is loaded into."""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        suggestion: Optional[str] = None
    ) -> None:
        if suggestion is None:
            suggestion = "Load the checkpoint without passing a network, or build one with matching num_classes"
        super().__init__(message, path=path, suggestion=suggestion)


class SadaTrainingError(SadaError):
    """Raised when source training diverges.

    Attributes:
        step: Optimizer step at which the failure was detected
        last_loss: The loss value that triggered the failure
        lr: Learning rate in effect at that step
    """

    exit_code = 3

    def __init__(
        self,
        message: str = "Training diverged",
        step: Optional[int] = None,
        last_loss: Optional[float] = None,
        lr: Optional[float] = None,
        suggestion: Optional[str] = None
    ) -> None:
        self.step = step
        self.last_loss = last_loss
        self.lr = lr
        if suggestion is None:
            suggestion = "Lower the base learning rate or the batch size and retry with the same seed"
        super().__init__(message, suggestion)


class SadaDataError(SadaError):
    """Raised when a dataset file cannot be read or written.

    Attributes:
        path: The file or directory involved
    """

    exit_code = 5

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        suggestion: Optional[str] = None
    ) -> None:
        self.path = path
        super().__init__(message, suggestion)
