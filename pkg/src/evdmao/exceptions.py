"""Exception hierarchy shared across the package."""


class EvdmaoError(Exception):
    """Base class for all package errors."""


class ConfigurationError(EvdmaoError, ValueError):
    """Inconsistent dimensions, bad indices or invalid parameter values."""


class InfeasibleError(EvdmaoError, RuntimeError):
    """A scenario or local constraint set admits no feasible point."""

    def __init__(self, message, agent=None):
        super().__init__(message)
        self.agent = agent


class ProtocolError(EvdmaoError, RuntimeError):
    """Message-round protocol violated (missing report, bad ordering)."""


class ScenarioValidationError(ConfigurationError):
    """Scenario file failed schema validation.

    ``field`` is a dotted path into the document and ``line`` the 1-based
    source line when it could be resolved.
    """

    def __init__(self, message, field=None, line=None):
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line
