"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes or resolutions are incompatible."""


class ConfigError(ValueError):
    """A configuration value is out of its valid range."""


class ContractError(RuntimeError):
    """A call violated an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class EmptyImageError(ValueError):
    """An image has no foreground to describe."""
