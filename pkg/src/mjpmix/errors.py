"""Exception hierarchy shared by all modules."""


class MjpmixError(Exception):
    """Base class for domain errors (CLI exit code 1)."""

    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class InvariantError(MjpmixError, ValueError):
    code = "invariant_violation"

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class ParseError(MjpmixError, ValueError):
    code = "parse_error"

    def __init__(self, message, locus=None):
        if locus is not None:
            message = f"{locus}: {message}"
        super().__init__(message)
        self.locus = locus


class DimensionMismatch(MjpmixError, ValueError):
    code = "dimension_mismatch"


class AbsorbingTransientState(MjpmixError, ValueError):
    code = "absorbing_transient_state"


class NonAbsorbingModel(MjpmixError):
    code = "non_absorbing_model"


class ZeroExitRate(NonAbsorbingModel):
    code = "zero_exit_rate"


class DegenerateRegime(MjpmixError):
    code = "degenerate_regime"


class AllRegimesImpossible(MjpmixError):
    code = "all_regimes_impossible"

    def __init__(self, message, paths=()):
        super().__init__(message)
        self.paths = list(paths)


class NotConverged(MjpmixError):
    """Raised when EM exhausts ``max_iter``; ``result`` holds the last iterate."""

    code = "not_converged"

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class InnerNotConverged(MjpmixError):
    code = "inner_not_converged"

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class NotAtMLE(MjpmixError):
    code = "not_at_mle"


class SingularInformation(MjpmixError):
    code = "singular_information"

    def __init__(self, message, parameters=()):
        super().__init__(message)
        self.parameters = list(parameters)

    def to_dict(self):
        d = super().to_dict()
        d["parameters"] = self.parameters
        return d


class MatexpOverflow(MjpmixError, OverflowError):
    code = "overflow"


class SingularSystem(MjpmixError):
    code = "singular_system"

    def __init__(self, message, states=()):
        super().__init__(message)
        self.states = list(states)


class NestingViolation(MjpmixError):
    code = "nesting_violation"
