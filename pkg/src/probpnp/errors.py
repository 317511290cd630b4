"""Exception types raised across the package."""


class ProbPnPError(Exception):
    """Base class for domain errors (CLI exit code 1)."""

    code = "domain_error"


class NonPositiveDepth(ProbPnPError):
    code = "non_positive_depth"


class SingularSystem(ProbPnPError):
    code = "singular_system"


class NoValidHypothesis(ProbPnPError):
    code = "no_valid_hypothesis"


class DegenerateFit(ProbPnPError):
    code = "degenerate_fit"


class FixedPointDivergence(DegenerateFit):
    code = "fixed_point_divergence"


class DivergenceDetected(ProbPnPError):
    code = "divergence_detected"


class SchemaError(Exception):
    """Malformed input document or config (CLI exit code 2)."""

    code = "schema_error"

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        parts = [message]
        if field is not None:
            parts.append(f"field={field}")
        if line is not None:
            parts.append(f"line={line}")
        super().__init__("; ".join(parts))
