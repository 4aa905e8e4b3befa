"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class BVCQRError(Exception):
    exit_code = 1


class ConfigError(BVCQRError):
    """Invalid configuration or command usage."""

    exit_code = 1


class DataError(BVCQRError):
    """Input data violates a structural requirement."""

    exit_code = 2


class NumericalError(BVCQRError):
    """Non-finite density/gradient or a failed sampler run."""

    exit_code = 3
