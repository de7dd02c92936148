"""Exception types shared across the package.

Every failure mode the library reports deliberately goes through one of
these, so callers (and the CLI exit-code mapping) can tell configuration
mistakes, bad data, and corrupted state apart.
"""


class DeskmtError(Exception):
    """Base class for all deskmt errors."""


class ShapeError(DeskmtError):
    """Tensor extents do not line up for the requested operation."""


class ConfigError(DeskmtError):
    """A configuration value or parameter is out of its legal range."""


class DataError(DeskmtError):
    """Corpus, vocabulary, or file-format problem."""


class DegenerateBatchError(DeskmtError):
    """A batch contains no loss-contributing (non-pad) positions."""


class ContractError(DeskmtError):
    """API misuse: a documented precondition was violated by the caller."""


class CheckError(DeskmtError):
    """A gradient check cannot run (e.g. the function is not deterministic)."""


class CorruptionError(DeskmtError):
    """Checkpoint bytes fail hash verification or are truncated."""


class IntegrityError(DeskmtError):
    """Registry or resume state does not match what was recorded."""
