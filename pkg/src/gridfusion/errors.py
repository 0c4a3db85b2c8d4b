"""Exception types shared across the package."""


class GridFusionError(Exception):
    """Base class for all errors raised by this package."""


class GraphConsistencyError(GridFusionError):
    """A factor or message refers to an edge or node that does not exist."""


class LinearizationError(GridFusionError):
    """Factor evaluation or Jacobian produced non-finite values."""

    def __init__(self, factor_id: str, detail: str = ""):
        self.factor_id = factor_id
        super().__init__(f"linearization failure at factor '{factor_id}'"
                         + (f": {detail}" if detail else ""))


class EliminationSingularityError(GridFusionError):
    """Block elimination hit a singular system even after jitter."""

    def __init__(self, factor_id: str, var_id: str):
        self.factor_id = factor_id
        self.var_id = var_id
        super().__init__(
            f"elimination singularity at factor '{factor_id}' toward variable '{var_id}'")


class UnobservableVariableError(GridFusionError):
    """Summed message precision for a variable is singular even after jitter."""

    def __init__(self, var_id: str):
        self.var_id = var_id
        super().__init__(f"variable '{var_id}' is unobservable (singular precision sum)")


class CaseParseError(GridFusionError):
    """Malformed network case file."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + loc)


class ModelError(GridFusionError):
    """Semantically invalid network model (missing slack, dangling branch, ...)."""


class PowerFlowDivergedError(GridFusionError):
    """Newton power flow failed to converge."""


class ForecastFitError(GridFusionError):
    """Regression design is unusable (rank deficient, bad covariates, ...)."""


class ScenarioError(GridFusionError):
    """Invalid or contradictory scenario event specification."""


class ConfigError(GridFusionError):
    """Invalid experiment configuration file."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + loc)
