"""Exception hierarchy shared across the package."""


class DriftTuneError(Exception):
    """Base class for all errors raised by drift_tune."""


class ShapeError(DriftTuneError, ValueError):
    """Operand shapes are not conformable."""


class NonFiniteError(DriftTuneError, ValueError):
    """An input contained NaN or Inf."""


class ConvergenceError(DriftTuneError, RuntimeError):
    """An iterative routine hit its iteration cap.

    Attributes:
        residual: largest normalized off-diagonal coupling left when the
            iteration stopped.
        sweeps: number of sweeps performed.
    """

    def __init__(self, message, residual, sweeps):
        super().__init__(f"{message} (residual={residual:.3e}, sweeps={sweeps})")
        self.residual = residual
        self.sweeps = sweeps


class LabelError(DriftTuneError, ValueError):
    """A class label is outside [0, num_classes)."""


class DataError(DriftTuneError, ValueError):
    """Malformed dataset or snapshot file.

    Attributes:
        row: 1-based row number in the source file, if known.
        column: 1-based column number in the source file, if known.
    """

    def __init__(self, message, row=None, column=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column
        self.path = path


class ConfigError(DriftTuneError, ValueError):
    """Invalid experiment manifest or training configuration."""
