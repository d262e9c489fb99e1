"""Shared exception types."""


class CosrError(Exception):
    """Base class for all package errors."""


class ConfigInvalid(CosrError):
    """A configuration object violates one of its invariants."""


class CanonicalizationFailed(CosrError):
    """No small-integer representative exists for a pi-group basis."""


class DomainError(CosrError):
    """A sample value falls outside the mathematical domain of an operation."""

    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = list(rows) if rows is not None else []


class ParseError(CosrError):
    """Malformed expression text."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class RankDeficient(CosrError):
    """Design matrix rank is below the coefficient count."""


class InsufficientData(CosrError):
    """Fewer samples than coefficients to fit."""


class DegenerateVariance(CosrError):
    """Total sum of squares is zero; R^2 undefined."""


class SchemaMismatch(CosrError):
    """CSV columns do not match the case specification."""

    def __init__(self, message, missing=(), extra=()):
        super().__init__(message)
        self.missing = list(missing)
        self.extra = list(extra)


class EmptyAfterFiltering(CosrError):
    """No usable rows remain after dropping non-finite entries."""


class LayerFailed(CosrError):
    """A compression layer could not preserve the previous layer's fidelity."""


class SignatureMismatch(CosrError):
    """Dataset columns do not match a chain's input signature."""
