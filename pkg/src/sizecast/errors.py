"""Exception hierarchy. All data/usage problems derive from SizecastError."""


class SizecastError(Exception):
    """Base class for data and usage errors (CLI maps these to exit code 2)."""


class ConfigError(SizecastError):
    """Invalid size-system configuration or hyperparameter values."""


class CatalogError(SizecastError):
    """Invalid catalog input (duplicate articles, bad size ladders)."""


class IngestError(SizecastError):
    """Order ingestion failed outright (bad header, error rate above the breaker)."""


class ModelError(SizecastError):
    """Model fitting or querying failed (empty dataset, divergence, missing article)."""


class EvalError(SizecastError):
    """Evaluation protocol violation (span too short, undefined metric)."""


class DegenerateSupportError(SizecastError):
    """Density mass is entirely outside the size grid; callers map this to Abstain."""
