"""Exception types raised by the plate-fluid simulator."""


class FsiError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigError(FsiError):
    """Invalid or unreadable run configuration."""

    def __init__(self, message: str, line: int | None = None) -> None:
        """Store the message and the offending config line, if known.

        Args:
            message (str): Human readable reason.
            line (int | None): 1-based line number in the config file.
        """
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StructuralError(FsiError):
    """Mesh, layout or trajectory pairing that the code does not support."""


class DomainError(FsiError):
    """Point outside the reference rectangle."""


class DataError(FsiError):
    """Non-finite values in the input data."""


class DimensionError(FsiError):
    """Vector or matrix sizes that do not match."""


class ContactError(FsiError):
    """Plate height at or below the contact floor."""

    def __init__(self, min_height: float, floor: float, step: int | None = None) -> None:
        """Store the offending height and the step index.

        Args:
            min_height (float): Smallest height found.
            floor (float): Contact floor in force.
            step (int | None): Time step index, when known.
        """
        self.min_height = min_height
        self.floor = floor
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"plate height {min_height:.6g} <= floor {floor:.6g}{where}")


class SingularMatrixError(FsiError):
    """Sparse factorization hit an exactly singular matrix."""

    def __init__(self, message: str, index: int | None = None) -> None:
        """Store the row or pivot index that exposed the singularity.

        Args:
            message (str): Human readable reason.
            index (int | None): Row or pivot index, when known.
        """
        self.index = index
        super().__init__(message)


class AccuracyError(FsiError):
    """A solve kept a backward error above the bound after iterative refinement."""

    def __init__(self, backward_error: float, bound: float) -> None:
        """Store the backward error that was reached.

        Args:
            backward_error (float): Normwise backward error of the final iterate.
            bound (float): Required bound.
        """
        self.backward_error = backward_error
        self.bound = bound
        super().__init__(f"backward error {backward_error:.3e} above {bound:.1e} after refinement")


class ConvergenceError(FsiError):
    """Newton iteration did not converge."""

    def __init__(self, history: list[float], step: int | None = None) -> None:
        """Store the residual history.

        Args:
            history (list[float]): Residual infinity norms per iteration.
            step (int | None): Time step index, when known.
        """
        self.history = list(history)
        self.step = step
        last = history[-1] if history else float("nan")
        super().__init__(
            f"Newton did not converge after {len(history) - 1} iterations"
            f" (step {step}, last residual {last:.3e})",
        )


class AcceptanceError(FsiError):
    """A measured rate, ledger or timing violated its acceptance band."""
