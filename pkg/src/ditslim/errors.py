"""Shared exception types. The CLI maps these to exit codes."""


class ConfigError(ValueError):
    """Bad configuration value or unknown configuration key."""


class ContractError(RuntimeError):
    """A documented precondition or invariant was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes are incompatible; message names both shapes."""


class EvaluationError(ContractError):
    """A checked function produced a non-finite value."""


class PlanError(ContractError):
    """A pruning plan does not validate against the teacher it targets."""
