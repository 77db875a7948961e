"""
Error names raised across the toolkit.

Domain errors map to exit code 1 on the command line, I/O and configuration
errors to exit code 2. The class name is what the command line prints on
stderr, so keep names stable.
"""


class DsranError(Exception):
    """Root of every error the toolkit raises on purpose."""

    exit_code = 1


class DomainError(DsranError):
    exit_code = 1


class IoFailure(DsranError):
    exit_code = 2


class ConfigError(DsranError, ValueError):
    exit_code = 2


# -- Dataset format --

class MissingBlob(IoFailure):
    pass


class SizeMismatch(IoFailure):
    pass


class BadToken(DomainError, ValueError):
    pass


class NonFinite(DomainError, ValueError):
    pass


# -- Tensor arithmetic --

class ShapeMismatch(DomainError, ValueError):
    pass


class DegenerateBatch(DomainError, ValueError):
    pass


class EmptyInput(DomainError, ValueError):
    pass


class ArityMismatch(DomainError, ValueError):
    pass


class EmptyCaption(DomainError, ValueError):
    pass


# -- Matching and evaluation --

class BatchTooSmall(DomainError, ValueError):
    pass


class ZeroVector(DomainError, ValueError):
    pass


class NonFiniteLoss(DomainError):
    pass


class BadLambda(DomainError, ValueError):
    pass


class EmptyMatrix(DomainError, ValueError):
    pass
