"""Exception hierarchy shared by all modules."""


class PBCError(Exception):
    """Base class for toolkit errors."""


class DimensionError(PBCError, ValueError):
    """Input vector or matrix has the wrong shape."""


class ModelInvariantError(PBCError):
    """A model evaluator violated one of its invariants (e.g. non-SPD mass)."""


class UnsupportedConfigurationError(PBCError):
    """The requested controller option does not apply to this model."""


class AdmissibilityError(PBCError):
    """Gains produce a closed loop outside the admissible class."""


class NotCanonicalizableError(PBCError):
    """The gyroscopic matrix of a target is not generated by the given Qd."""


class InfeasibleError(PBCError):
    """No Lyapunov parameter satisfies the positivity conditions."""


class ScopeError(PBCError):
    """A spectral rule was applied outside the case it covers."""


class DivergenceError(PBCError):
    """Numerical integration blew up."""


class ParameterError(PBCError, ValueError):
    """An analysis parameter is outside its admissible range."""
