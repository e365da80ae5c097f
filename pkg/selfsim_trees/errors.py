"""
errors.py

Exception types raised across the selfsim_trees package.
"""


class SelfSimError(Exception):
    """Base class for every error raised by selfsim_trees."""


class TreeError(SelfSimError, ValueError):
    """Malformed tree, keep-mask or point reference."""


class ParameterError(SelfSimError, ValueError):
    """A parameter lies outside its admissible range."""


class InadmissibleError(ParameterError):
    """A reparametrization would give infinite mass near the root."""


class ConditioningError(SelfSimError, RuntimeError):
    """A rejection sampler exceeded its attempt cap."""


class TruncationError(SelfSimError, RuntimeError):
    """A truncated numeric object lost too much mass."""
