"""Exception types shared across the package."""


class RlfolioError(Exception):
    """Base class for all package errors."""


class ParseError(RlfolioError):
    """A market-data row failed to parse. Carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DuplicateRowError(RlfolioError):
    """Duplicate (date, symbol) pair in an input file."""


class EmptyUniverseError(RlfolioError):
    """No symbol survived the coverage filter."""


class WindowError(RlfolioError):
    """Not enough history for the requested window."""


class ShapeError(RlfolioError):
    """Tensor shapes incompatible for an operation. Names the op."""


class ContractError(RlfolioError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(RlfolioError):
    """Invalid configuration value. Carries the dotted field path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DivergenceError(RlfolioError):
    """Training produced a non-finite loss or gradient."""


class LifecycleError(RlfolioError):
    """Environment stepped after episode termination."""
