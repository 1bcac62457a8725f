"""Exception hierarchy."""


class TaxflowError(Exception):
    """Base class for all errors raised by taxflow."""


class GridError(TaxflowError, ValueError):
    """Invalid grid or grid function (bad bounds, too few nodes, non-finite values)."""


class DomainError(TaxflowError, ValueError):
    """Argument outside the support of a function."""


class AgentError(TaxflowError):
    """The individual labor-supply problem could not be solved reliably."""


class NonUniqueOptimum(AgentError):
    """Two distinct labor choices attain the maximal utility."""


class SnapshotError(TaxflowError):
    """A tax schedule does not induce a valid economy (monotonicity, retention rate, ...)."""


class ConvergenceError(TaxflowError):
    """An iterative procedure did not meet its tolerance."""


class KernelError(TaxflowError):
    """Heat-kernel solver failure (mass drift, undershoot, bad source)."""


class ConfigError(TaxflowError, ValueError):
    """Scenario configuration is invalid.  ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
