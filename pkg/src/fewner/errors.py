"""Package-wide exception types."""


class FewnerError(Exception):
    """Base class for errors raised by this package."""


class ParseError(FewnerError):
    """Malformed corpus, lexicon, episode, or config input."""


class SamplingError(FewnerError):
    """Episode sampling could not satisfy the N-way K-shot contract."""


class ConfigError(FewnerError):
    """Invalid hyperparameter or configuration value."""


class CapabilityError(FewnerError):
    """An optional capability (e.g. a pretrained encoder adapter) is absent."""
