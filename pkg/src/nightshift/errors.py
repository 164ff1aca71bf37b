"""Exception types shared across modules."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""


class DataError(ValueError):
    """A dataset file is malformed or references missing resources."""


class NumericError(RuntimeError):
    """A non-finite value appeared where finite numbers are required."""


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss; message names the last good checkpoint."""


class EmptyProposalsError(ValueError):
    """An operation that needs at least one proposal received none."""


class SkipBatch(Exception):
    """Control-flow signal: this unsupervised sample has nothing to train on."""
