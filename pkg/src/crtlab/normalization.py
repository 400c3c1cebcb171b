"""Per-prompt length normalization.

``lnorm(y) = logistic((LEN(y) - mean) / std)`` where ``mean``/``std`` are
either the live statistics of the rollout group being scored or statistics
frozen from a reference policy's rollouts.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .core import PolicyParams, ReferenceSnapshot, RolloutGroup, population_stats
from .exceptions import InsufficientDataError, MissingStatsError, UnsupportedModeError

DEFAULT_VARIANCE_FLOOR = 1e-8

# keep outputs strictly inside (0, 1) even when z saturates the logistic
_LO = np.finfo(float).tiny
_HI = 1.0 - np.finfo(float).epsneg


def logistic(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, _LO, _HI)


def standardize(lengths, mean: float, std: float, variance_floor: float = DEFAULT_VARIANCE_FLOOR):
    scale = max(std, float(np.sqrt(variance_floor)))
    return (np.asarray(lengths, dtype=float) - mean) / scale


@dataclass(frozen=True)
class NormStatsSource:
    """Where normalization statistics come from.

    ``mode="live"`` uses each group's own mean/std; ``mode="frozen"`` looks
    them up in ``stats`` (prompt id -> (mean, std)).
    """

    mode: str = "live"
    stats: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    variance_floor: float = DEFAULT_VARIANCE_FLOOR

    def __post_init__(self) -> None:
        if self.mode not in ("live", "frozen"):
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be > 0")

    @classmethod
    def live(cls, variance_floor: float = DEFAULT_VARIANCE_FLOOR) -> "NormStatsSource":
        return cls("live", {}, variance_floor)

    @classmethod
    def frozen(
        cls,
        source: ReferenceSnapshot | Mapping[str, tuple[float, float]],
        variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    ) -> "NormStatsSource":
        stats = source.per_prompt_len_stats if isinstance(source, ReferenceSnapshot) else source
        return cls("frozen", dict(stats), variance_floor)

    @property
    def is_frozen(self) -> bool:
        return self.mode == "frozen"

    def lookup(self, prompt_id: str) -> tuple[float, float]:
        try:
            return self.stats[prompt_id]
        except KeyError:
            raise MissingStatsError(f"no frozen length statistics for prompt {prompt_id!r}") from None

    def require_frozen(self) -> None:
        if not self.is_frozen:
            raise UnsupportedModeError(
                "live statistics depend on the sampled batch; exact evaluation needs frozen stats"
            )


def normalize_lengths(group: RolloutGroup, source: NormStatsSource) -> np.ndarray:
    """Normalized lengths of ``group``'s samples, in sample order."""
    if len(group) == 0:
        raise ValueError("cannot normalize an empty group")
    if source.is_frozen:
        mean, std = source.lookup(group.prompt_id)
    else:
        mean, std = group.len_mean, group.len_std
    return logistic(standardize(group.lengths, mean, std, source.variance_floor))


def freeze_stats(params: PolicyParams, groups: Iterable[RolloutGroup]) -> ReferenceSnapshot:
    """Snapshot per-prompt accuracy and raw-length (mean, population std).

    ``params`` is the policy that produced the rollouts and is stored with
    the snapshot. Groups sharing a prompt id are pooled. Every prompt needs at least two
    rollouts.
    """
    lengths: dict[str, list[float]] = {}
    correct: dict[str, list[float]] = {}
    for g in groups:
        lengths.setdefault(g.prompt_id, []).extend(g.lengths.tolist())
        correct.setdefault(g.prompt_id, []).extend(g.correct.tolist())
    if not lengths:
        raise InsufficientDataError("no rollouts to freeze")
    for pid, ls in lengths.items():
        if len(ls) < 2:
            raise InsufficientDataError(
                f"prompt {pid!r} has {len(ls)} rollout(s); at least 2 are needed"
            )
    stats = {pid: population_stats(ls) for pid, ls in lengths.items()}
    acc = {pid: float(np.mean(c)) for pid, c in correct.items()}
    used = min(len(ls) for ls in lengths.values())
    return ReferenceSnapshot(params, acc, stats, used)
