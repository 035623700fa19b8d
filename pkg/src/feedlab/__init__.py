"""feedlab: a desk-scale laboratory for reward learning from simulated feedback.

The package covers the full loop on two small control tasks: train expert
policies, collect segment buffers from their checkpoints, synthesize six kinds
of feedback (ratings, pairwise preferences, demonstrations, corrections,
cluster descriptions, cluster preferences), corrupt that feedback with a
calibrated noise model, fit reward-model ensembles, and run downstream agents
on the learned rewards.
"""

from feedlab.errors import (
    CalibrationError,
    ConfigError,
    DataError,
    DatasetTypeError,
    DomainError,
    FeedlabError,
    GenerationExhaustedError,
    HashMismatchError,
    SchemaError,
    StageError,
    TruncatedFileError,
    UnsupportedEnvError,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "ConfigError",
    "DataError",
    "DatasetTypeError",
    "DomainError",
    "FeedlabError",
    "GenerationExhaustedError",
    "HashMismatchError",
    "SchemaError",
    "StageError",
    "TruncatedFileError",
    "UnsupportedEnvError",
    "__version__",
]
