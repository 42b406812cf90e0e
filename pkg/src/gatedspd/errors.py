"""Exception types shared across the toolkit."""


class GatedSpdError(ValueError):
    """Base class for all toolkit-specific errors."""


class ConfigError(GatedSpdError):
    """Invalid configuration: bad key, bad value, or violated invariant.

    Messages name the offending key (and line number when parsing text).
    """


class DataFormatError(GatedSpdError):
    """Malformed input file (CSV, timestamp log). Messages carry line numbers."""


class EstimationError(GatedSpdError):
    """An estimator cannot produce a defined result from the given data.

    Covers undefined estimates (zero denominator), insufficient data,
    degenerate fit geometry, non-decaying data and empty histograms.
    """
