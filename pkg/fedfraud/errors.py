"""Exception hierarchy shared by the library, the coordinator and the CLI."""

from typing import Optional


class FedFraudError(Exception):
    """Base class. ``error_class`` is the machine-parseable name printed by the CLI."""

    error_class = "fedfraud_error"


class ConfigError(FedFraudError):
    error_class = "config_error"


class DimensionError(FedFraudError):
    error_class = "dimension_error"


class ParamsFormatError(FedFraudError):
    """Malformed params payload. ``reason`` is malformed, shape_mismatch or nonfinite_params."""

    error_class = "params_format_error"

    def __init__(self, message: str, reason: str = "malformed"):
        self.reason = reason
        super().__init__(message)


class MetricsError(FedFraudError):
    """A metrics record outside [0, 1] or not finite."""

    error_class = "metrics_error"


class SchemaError(FedFraudError):
    error_class = "schema_error"


class ParseError(FedFraudError):
    """A cell could not be parsed as its column kind."""

    error_class = "parse_error"

    def __init__(self, row: int, column: str, value: str, kind: str):
        self.row = row
        self.column = column
        self.value = value
        self.kind = kind
        super().__init__(f"row {row}, column '{column}': cannot parse {value!r} as {kind}")


class EmptyDatasetError(FedFraudError):
    error_class = "empty_dataset"


class PipelineError(FedFraudError):
    error_class = "pipeline_error"


class AggregationError(FedFraudError):
    error_class = "aggregation_error"


class ClientFailure(FedFraudError):
    """A client's local update failed; the round is aborted."""

    error_class = "client_failure"

    def __init__(self, client_id: str, cause: Exception):
        self.client_id = client_id
        self.cause = cause
        super().__init__(f"client '{client_id}' failed: {cause}")


class ExplainError(FedFraudError):
    error_class = "explain_error"


class ConnectivityError(FedFraudError):
    error_class = "connectivity_error"


class ProtocolError(FedFraudError):
    """The coordinator rejected a request for a reason the agent cannot recover from."""

    error_class = "protocol_error"

    def __init__(self, reason: str, message: Optional[str] = None):
        self.reason = reason
        super().__init__(f"{reason}: {message}" if message else reason)


class UpdateRejected(FedFraudError):
    """Coordinator-side rejection with a reason code and HTTP status."""

    error_class = "update_rejected"

    def __init__(self, reason: str, status_code: int, detail: str = ""):
        self.reason = reason
        self.status_code = status_code
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)
