"""Exception types shared across the package."""


class PooledCSError(Exception):
    """Base class for errors raised by pooledcs."""


class InfeasibleParameters(PooledCSError, ValueError):
    pass


class DimensionMismatch(PooledCSError, ValueError):
    pass


class BudgetExceeded(PooledCSError, RuntimeError):
    """An enumeration or search ran past its configured work budget."""


class DegenerateComponent(PooledCSError, RuntimeError):
    """A mixture component lost all responsibility mass twice in a row."""


class ConfigError(PooledCSError, ValueError):
    pass
