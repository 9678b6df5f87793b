"""Exception types shared across the pool, backend, and migration engine."""


class ConfigError(ValueError):
    """Invalid topology, policy, or benchmark configuration."""


class TierFull(Exception):
    """No free frame in the requested memory tier; caller must evict first."""


class IllegalState(Exception):
    """Operation applied to a page whose placement does not allow it."""


class PoolTimeout(Exception):
    """A fix() could not acquire its page within the configured budget."""
