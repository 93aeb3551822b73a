"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor extents or channel counts do not line up."""


class ConfigError(ValueError):
    """An illegal configuration value (ratio, kernel, mask, ...)."""


class FormatError(ValueError):
    """A weight container could not be parsed."""
