"""Exception hierarchy shared by every module.

Each class maps to one CLI exit code (see ``modalfuse.cli``).
"""


class ModalFuseError(Exception):
    exit_code = 1


class ConfigError(ModalFuseError, ValueError):
    """Invalid configuration or call arguments."""

    exit_code = 1


class StructuralError(ModalFuseError, ValueError):
    """Shape or dimension mismatch between inputs."""

    exit_code = 2


class FormatError(ModalFuseError):
    """Malformed file on disk (magic, version, truncation, shape guards)."""

    exit_code = 2


class IntegrityError(ModalFuseError):
    """Dataset references that do not resolve or disagree on dimension."""

    exit_code = 2


class DomainError(ModalFuseError, ValueError):
    """Input outside an operation's mathematical domain (e.g. zero norm)."""

    exit_code = 3


class NumericalError(ModalFuseError, ArithmeticError):
    """Non-finite values appeared during a computation."""

    exit_code = 3
