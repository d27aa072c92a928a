"""Exception hierarchy shared by every fedsilo layer.

Each error carries a stable ``code`` slug and the HTTP status the API
layer maps it to, so the server, CLI, and agent all speak the same
error vocabulary.
"""

from __future__ import annotations


class FedsiloError(Exception):
    """Base class for all fedsilo errors."""

    code = "error"
    http_status = 400

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__


# --- parameter vectors ---------------------------------------------------

class LayoutMismatch(FedsiloError):
    code = "layout_mismatch"


class DegenerateWeights(FedsiloError):
    code = "degenerate_weights"


class NonFiniteValues(FedsiloError):
    code = "non_finite_values"


class MalformedBlob(FedsiloError):
    code = "malformed_blob"


# --- aggregation ----------------------------------------------------------

class EmptyUpdateSet(FedsiloError):
    code = "empty_update_set"


class NegativeStaleness(FedsiloError):
    code = "negative_staleness"


class AlgorithmArityMismatch(FedsiloError):
    code = "algorithm_arity_mismatch"


# --- identity and access --------------------------------------------------

class DuplicateEmail(FedsiloError):
    code = "duplicate_email"
    http_status = 409


class WeakPassword(FedsiloError):
    code = "weak_password"


class BadCredentials(FedsiloError):
    code = "bad_credentials"
    http_status = 401


class Unauthorized(FedsiloError):
    code = "unauthorized"
    http_status = 401


class Forbidden(FedsiloError):
    code = "forbidden"
    http_status = 403


class NotAdmin(Forbidden):
    code = "not_admin"


class AlreadyMember(FedsiloError):
    code = "already_member"
    http_status = 409


class NoSuchInvitation(FedsiloError):
    code = "no_such_invitation"
    http_status = 404


class NoSuchAccount(FedsiloError):
    code = "no_such_account"
    http_status = 404


class NoSuchFederation(FedsiloError):
    code = "no_such_federation"
    http_status = 404


# --- dispatch fabric --------------------------------------------------------

class DuplicateEndpointName(FedsiloError):
    code = "duplicate_endpoint_name"
    http_status = 409


class UnknownEndpoint(FedsiloError):
    code = "unknown_endpoint"
    http_status = 404


class UnknownTask(FedsiloError):
    code = "unknown_task"
    http_status = 404


class DuplicateResult(FedsiloError):
    code = "duplicate_result"
    http_status = 409


class InvalidTaskResult(FedsiloError):
    code = "invalid_task_result"


class InvalidMetrics(FedsiloError):
    code = "invalid_metrics"


class NoSuchBlob(FedsiloError):
    code = "no_such_blob"
    http_status = 404


class DigestMismatch(FedsiloError):
    code = "digest_mismatch"
    http_status = 500


class CrossFederationDispatch(FedsiloError):
    code = "cross_federation_dispatch"
    http_status = 403


# --- orchestrator -----------------------------------------------------------

class InvalidConfig(FedsiloError):
    """Config rejected; ``field_errors`` maps field name to reason."""

    code = "invalid_config"

    def __init__(self, field_errors: dict[str, str]):
        details = "; ".join(f"{k}: {v}" for k, v in sorted(field_errors.items()))
        super().__init__(f"invalid config: {details}")
        self.field_errors = field_errors


class EndpointOffline(FedsiloError):
    code = "endpoint_offline"
    http_status = 409


class QuorumNotReached(FedsiloError):
    code = "quorum_not_reached"


class NoSuchExperiment(FedsiloError):
    code = "no_such_experiment"
    http_status = 404


# --- agent ------------------------------------------------------------------

class ParseError(FedsiloError):
    code = "parse_error"


class LabelOutOfRange(FedsiloError):
    code = "label_out_of_range"


class NonFiniteLoss(FedsiloError):
    code = "non_finite_loss"


class EmptySplit(FedsiloError):
    code = "empty_split"


class InvalidPrivacyConfig(FedsiloError):
    code = "invalid_privacy_config"


_BY_CODE = {
    cls.code: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, FedsiloError)
}


def error_for_code(code: str, message: str = "") -> FedsiloError:
    """Rebuild a typed error from its wire code (used by HTTP clients)."""
    cls = _BY_CODE.get(code, FedsiloError)
    if cls is InvalidConfig:
        return InvalidConfig({"config": message})
    return cls(message)
