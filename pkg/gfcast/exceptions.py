class GfcastError(Exception):
    """Base error. Carries a module-qualified code and the process exit code the CLI uses."""
    exit_code = 3
    code = "gfcast.error"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "details": {k: str(v) for k, v in self.details.items()}}


class ConfigError(GfcastError):
    exit_code = 2
    code = "config.invalid"


class PanelError(ConfigError):
    code = "panel.invalid"


class GridError(PanelError):
    code = "panel.off-grid"


class MapperError(ConfigError):
    code = "mapping.invalid-params"


class DgpError(ConfigError):
    code = "simulator.invalid-dgp"


class PolicySpecError(ConfigError):
    code = "exposure.invalid-policy"


class WindowError(GfcastError):
    code = "panel.window-underflow"


class OracleError(GfcastError):
    code = "simulator.cap-exceeded"


class EstimationError(GfcastError):
    code = "gmethods.estimation-failed"
    reason = "estimation-failed"


class UnestimableFactorError(EstimationError):
    code = "gmethods.unestimable-factor"
    reason = "unestimable-factor"


class BelowMinCellError(EstimationError):
    code = "gmethods.below-min-cell"
    reason = "below-min-cell"


class NoControlMatchError(EstimationError):
    code = "gmethods.no-control-match"
    reason = "no-control-match"


class AllUnitsDroppedError(EstimationError):
    code = "gmethods.all-dropped"


class ImputationError(EstimationError):
    code = "forecasting.unestimable-transition"
    reason = "unestimable-transition"


class PolicyError(EstimationError):
    code = "exposure.policy-infeasible"
    reason = "policy-infeasible"


class OverlapRefusal(GfcastError):
    exit_code = 4
    code = "forecasting.overlap-refusal"


class ValidationFailure(GfcastError):
    exit_code = 5
    code = "validate.failed"
