"""Exception types shared across the package."""


class MoETrainError(Exception):
    """Base class for all errors raised by moetrain."""

    kind = "error"

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class RejectedInputError(MoETrainError, ValueError):
    kind = "rejected_input"


class RejectedParameterError(RejectedInputError):
    kind = "rejected_parameter"


class StaleCacheError(RejectedInputError):
    kind = "stale_cache"


class OracleFailureError(MoETrainError, ArithmeticError):
    kind = "oracle_failure"


class NumericalInstabilityError(MoETrainError, ArithmeticError):
    kind = "numerical_instability"

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["layer"] = self.layer
        return d


class AnomalySignal(NumericalInstabilityError):
    """Non-finite gradient or norm; consumed by the spike guard."""

    kind = "anomaly"


class FitFailureError(MoETrainError, RuntimeError):
    kind = "fit_failure"

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["diagnostics"] = self.diagnostics
        return d


class RangeError(MoETrainError, ValueError):
    kind = "range"
