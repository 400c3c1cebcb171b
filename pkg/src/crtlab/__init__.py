"""crtlab: constraint-rectified length training on a synthetic reasoning environment."""

from .core import (
    HyperParams,
    PolicyParams,
    PromptInstance,
    PromptSet,
    ReferenceSnapshot,
    RolloutGroup,
    Stage,
    TraceSample,
    TrainerState,
    load_prompt_set,
    make_prompt_set,
)
from .estimators import CRTPolicy, LengthNormalizer
from .env import EnvConfig, make_trace, render_trace, sample_group, verify
from .exceptions import (
    ConfigError,
    CrtError,
    InsufficientDataError,
    MissingStatsError,
    NumericError,
    PromptSetError,
    RangeError,
    UnsupportedModeError,
)
from .gradients import (
    ACCURACY,
    NORMALIZED_LENGTH,
    estimate_gradient,
    exact_gradient,
    exact_objective,
)
from .metrics import AES1, AES2, EvalReport, aes, compression_ratio, stability_table
from .normalization import NormStatsSource, freeze_stats, normalize_lengths
from .trainer import Mode, TrainingRun, switching_decision

__version__ = "0.1.0"

__all__ = [
    "ACCURACY",
    "AES1",
    "AES2",
    "CRTPolicy",
    "ConfigError",
    "CrtError",
    "EnvConfig",
    "EvalReport",
    "HyperParams",
    "InsufficientDataError",
    "LengthNormalizer",
    "MissingStatsError",
    "Mode",
    "NORMALIZED_LENGTH",
    "NormStatsSource",
    "NumericError",
    "PolicyParams",
    "PromptInstance",
    "PromptSet",
    "PromptSetError",
    "RangeError",
    "ReferenceSnapshot",
    "RolloutGroup",
    "Stage",
    "TraceSample",
    "TrainerState",
    "TrainingRun",
    "UnsupportedModeError",
    "aes",
    "compression_ratio",
    "estimate_gradient",
    "exact_gradient",
    "exact_objective",
    "freeze_stats",
    "load_prompt_set",
    "make_prompt_set",
    "make_trace",
    "normalize_lengths",
    "render_trace",
    "sample_group",
    "stability_table",
    "switching_decision",
    "verify",
]
