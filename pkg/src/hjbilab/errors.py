"""Exception hierarchy shared by all solver modules."""


class HJBILabError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(HJBILabError):
    """Inconsistent operator or experiment definition."""


class ExpressionError(ConfigurationError):
    """Syntax or name error inside a coefficient expression.

    ``line`` and ``column`` are 1-based. ``line`` is ``None`` for
    expressions that did not come from a file.
    """

    def __init__(self, message, column=None, line=None, source=None):
        self.message = message
        self.column = column
        self.line = line
        self.source = source
        super().__init__(self._render())

    def _render(self):
        where = []
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.column is not None:
            where.append(f"column {self.column}")
        prefix = f"{', '.join(where)}: " if where else ""
        text = f"{prefix}{self.message}"
        if self.source is not None:
            text += f"\n    {self.source}"
            if self.column is not None:
                text += "\n    " + " " * (self.column - 1) + "^"
        return text

    def located(self, line, column_offset=0):
        """Return a copy shifted to a position inside an enclosing file."""
        col = None if self.column is None else self.column + column_offset
        return ExpressionError(self.message, col, line, self.source)


class AdmissibilityError(HJBILabError):
    """The stencil of an operator is not monotone on the grid."""


class DivergenceError(HJBILabError):
    """Non-finite values appeared during time stepping."""


class ConvergenceError(HJBILabError):
    """An iterative solve hit its iteration cap."""


class InconclusiveError(HJBILabError):
    """A long-time estimate has not settled; try a longer horizon."""


class EllipticityError(HJBILabError):
    """A uniform ellipticity hypothesis fails on the sampled points."""


class InfeasibleError(HJBILabError):
    """The requested resolution leads to an unusable time step."""
