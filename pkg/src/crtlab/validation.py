"""Input checks shared by the estimator front end."""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from typing import Any

import numpy as np

from .core import PromptInstance, PromptSet, RolloutGroup
from .env import EnvConfig
from .exceptions import ConfigError, PromptSetError


def check_prompt_set(X: Any, s_max: int | None = None) -> PromptSet:
    """Coerce ``X`` to a :class:`PromptSet`.

    Accepts a PromptSet, an iterable of PromptInstance or of prompt dicts,
    or a ``{"prompts": [...]}`` document.
    """
    if isinstance(X, PromptSet):
        ps = X
    else:
        if isinstance(X, Mapping):
            X = X.get("prompts", None)
            if X is None:
                raise PromptSetError('expected a {"prompts": [...]} document')
        if isinstance(X, (str, bytes)) or not isinstance(X, Iterable):
            raise PromptSetError(f"expected a prompt collection, got {type(X).__name__}")
        items = [p if isinstance(p, PromptInstance) else PromptInstance.from_dict(p) for p in X]
        ps = PromptSet(items)
    if s_max is not None:
        too_deep = [p.id for p in ps if p.required_depth > s_max]
        if too_deep:
            raise ConfigError(f"prompts need more than S_max={s_max} steps: {too_deep[:5]}")
    return ps


def check_groups(groups: Any, min_size: int = 1) -> list[RolloutGroup]:
    if isinstance(groups, RolloutGroup):
        groups = [groups]
    out = list(groups)
    if not out:
        raise ValueError("need at least one rollout group")
    for g in out:
        if not isinstance(g, RolloutGroup):
            raise TypeError(f"expected RolloutGroup, got {type(g).__name__}")
        if len(g) < min_size:
            raise ValueError(f"group {g.prompt_id!r} has {len(g)} rollouts; need >= {min_size}")
    return out


def check_env(env: EnvConfig | Mapping[str, Any] | None) -> EnvConfig:
    if env is None:
        return EnvConfig()
    if isinstance(env, EnvConfig):
        return env
    if isinstance(env, Mapping):
        return EnvConfig.from_dict(env)
    raise ConfigError(f"env must be an EnvConfig or mapping, got {type(env).__name__}")


def check_seed(random_state: Any) -> int:
    """Integer seed for the derived RNG streams. ``None`` means 0 so runs stay reproducible."""
    if random_state is None:
        return 0
    if isinstance(random_state, (bool, np.bool_)) or not isinstance(random_state, (int, np.integer)):
        raise ConfigError("random_state must be an int (generators cannot seed derived streams)")
    seed = int(random_state)
    if not 0 <= seed < 2**64:
        raise ConfigError("random_state must fit in 64 unsigned bits")
    return seed


def check_positive_int(value: Any, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}")
    return int(value)
