"""Exception types raised across the package."""


class KoopGovError(Exception):
    """Base class for all package errors."""


class NonFinite(KoopGovError):
    """Plant integration produced NaN/inf (usually bad parameters or tire setup)."""


class DimensionMismatch(KoopGovError, ValueError):
    pass


class Diverged(KoopGovError):
    """Training loss became non-finite; try a smaller learning rate."""


class FormatError(KoopGovError, ValueError):
    pass


class DegenerateChannel(KoopGovError, ValueError):
    pass


class TooFewTrajectories(KoopGovError, ValueError):
    pass


class EmptyTestSet(KoopGovError, ValueError):
    pass


class ModelMissing(KoopGovError):
    pass


class Infeasible(KoopGovError):
    pass


class ConfigError(KoopGovError, ValueError):
    pass
