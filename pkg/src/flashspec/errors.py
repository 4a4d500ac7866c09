"""Exception types shared across the package."""


class StructureError(ValueError):
    """A tree mutation violated structural invariants (missing parent, duplicate child, ...)."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class ConfigError(ValueError):
    """A configuration value is missing, unresolvable, or out of range."""


class TrainingDiverged(RuntimeError):
    """Predictor training produced a non-finite loss."""
