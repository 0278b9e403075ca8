"""Exception types shared across the toolkit.

Config-shaped problems (bad sizes, bad files) and numerical failures are
kept distinct so the CLI can map them to different exit codes.
"""


class LvevalError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LvevalError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class NumericalError(LvevalError):
    """Numerical failure during computation (CLI exit code 3)."""


class PartitionSizeError(ConfigError):
    """Requested neuron partition sizes exceed the channel count."""


class SplitError(ConfigError):
    """Invalid train/test trial split request."""


class PlanError(ConfigError):
    """Invalid k-shot resampling plan request."""


class UnusableNeuronError(ConfigError):
    """A k-out neuron is silent across all train trials."""


class FormatError(ConfigError):
    """On-disk dataset or model file violates its schema."""


class DegenerateLikelihoodError(NumericalError):
    """Every state assigns likelihood zero to some time step."""

    def __init__(self, message, trial=None):
        super().__init__(message)
        self.trial = trial


class FitError(NumericalError):
    """Model fitting cannot proceed (empty data, ill-posed M-step)."""


class CovarianceError(NumericalError):
    """A covariance matrix is not usable (Cholesky/inversion failure)."""

    def __init__(self, message, time_index=None):
        super().__init__(message)
        self.time_index = time_index


class DomainError(NumericalError):
    """Argument outside the mathematical domain of an operation."""


class EmptyScoreError(NumericalError):
    """Every held-out neuron was excluded from a co-smoothing score."""


class SingularRegimeError(DomainError):
    """Theory evaluated at a singular parameter point (e.g. gamma = 1)."""
