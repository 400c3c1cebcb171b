"""Shared domain types: prompts, traces, rollout groups, policy parameters
and the trainer's state.

Everything here is an immutable value object. Numeric arrays held by
:class:`PolicyParams` are marked read-only on construction.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import ConfigError, DuplicateIdError, PromptSetError

WEIGHT_SUM_TOL = 1e-9


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------


def fold_operands(operands: Sequence[int], steps: int) -> int:
    """Running sum of the first ``steps`` operands."""
    return int(sum(operands[:steps]))


@dataclass(frozen=True)
class PromptInstance:
    """One arithmetic-chain task.

    ``operands`` holds exactly ``required_depth`` positive integers and the
    answer is their sum, so every partial sum before the last step differs
    from the answer.
    """

    id: str
    required_depth: int
    operands: tuple[int, ...]
    answer: int
    weight: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "operands", tuple(int(o) for o in self.operands))

    def partial(self, steps: int) -> int:
        return fold_operands(self.operands, min(steps, self.required_depth))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "required_depth": self.required_depth,
            "operands": list(self.operands),
            "answer": self.answer,
            "weight": self.weight,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PromptInstance":
        return cls(
            id=str(d["id"]),
            required_depth=int(d["required_depth"]),
            operands=tuple(d["operands"]),
            answer=int(d["answer"]),
            weight=float(d.get("weight", 1.0)),
        )


def recompute_answer(prompt: PromptInstance) -> int:
    """Fold (sum) of the prompt's operands over ``required_depth`` steps."""
    return fold_operands(prompt.operands, prompt.required_depth)


def validate_prompt(prompt: PromptInstance, s_max: int | None = None) -> None:
    if not prompt.id:
        raise PromptSetError("prompt id must be a non-empty string")
    if prompt.required_depth < 1:
        raise PromptSetError(
            f"prompt {prompt.id!r}: required_depth must be >= 1, got {prompt.required_depth}"
        )
    if s_max is not None and prompt.required_depth > s_max:
        raise PromptSetError(
            f"prompt {prompt.id!r}: required_depth {prompt.required_depth} exceeds S_max={s_max}"
        )
    if len(prompt.operands) != prompt.required_depth:
        raise PromptSetError(
            f"prompt {prompt.id!r}: expected {prompt.required_depth} operands, "
            f"got {len(prompt.operands)}"
        )
    if any(o < 1 for o in prompt.operands):
        raise PromptSetError(f"prompt {prompt.id!r}: operands must be positive integers")
    if not (math.isfinite(prompt.weight) and prompt.weight >= 0):
        raise PromptSetError(f"prompt {prompt.id!r}: weight must be finite and >= 0")
    if recompute_answer(prompt) != prompt.answer:
        raise PromptSetError(
            f"prompt {prompt.id!r}: stored answer {prompt.answer} != "
            f"recomputed {recompute_answer(prompt)}"
        )


class PromptSet(Sequence[PromptInstance]):
    """An ordered collection of prompts with weights summing to one."""

    def __init__(self, prompts: Iterable[PromptInstance], normalize: bool = True):
        prompts = list(prompts)
        if not prompts:
            raise PromptSetError("prompt set is empty")
        seen: set[str] = set()
        for p in prompts:
            if p.id in seen:
                raise DuplicateIdError(f"duplicate prompt id {p.id!r}")
            seen.add(p.id)
            validate_prompt(p)
        total = math.fsum(p.weight for p in prompts)
        if not total > 0:
            raise PromptSetError(f"prompt weights must sum to a positive value, got {total}")
        if normalize:
            prompts = [dataclasses.replace(p, weight=p.weight / total) for p in prompts]
        elif abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise PromptSetError(f"prompt weights sum to {total}, expected 1")
        self._prompts: tuple[PromptInstance, ...] = tuple(prompts)
        self._index = {p.id: i for i, p in enumerate(self._prompts)}
        w = np.array([p.weight for p in self._prompts], dtype=float)
        w.setflags(write=False)
        self._weights = w

    def __len__(self) -> int:
        return len(self._prompts)

    def __getitem__(self, i):  # type: ignore[override]
        return self._prompts[i]

    def __iter__(self) -> Iterator[PromptInstance]:
        return iter(self._prompts)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PromptSet) and self._prompts == other._prompts

    def __repr__(self) -> str:
        return f"PromptSet(n={len(self)})"

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self._prompts]

    def get(self, prompt_id: str) -> PromptInstance:
        return self._prompts[self._index[prompt_id]]

    def __contains__(self, prompt_id: object) -> bool:
        return prompt_id in self._index

    def sample(self, rng: np.random.Generator, n: int) -> list[PromptInstance]:
        """Draw ``n`` prompts i.i.d. from the weight distribution."""
        idx = rng.choice(len(self._prompts), size=n, replace=True, p=self._weights)
        return [self._prompts[i] for i in idx]

    def to_dict(self) -> dict[str, Any]:
        return {"prompts": [p.to_dict() for p in self._prompts]}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PromptSet":
        if not isinstance(doc, Mapping) or not isinstance(doc.get("prompts"), list):
            raise PromptSetError('prompt-set document must be an object with a "prompts" list')
        prompts = []
        for i, raw in enumerate(doc["prompts"]):
            try:
                prompts.append(PromptInstance.from_dict(raw))
            except (KeyError, TypeError, ValueError) as exc:
                raise PromptSetError(f"prompt #{i}: malformed entry ({exc})") from exc
        return cls(prompts)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def load_prompt_set(path: str | Path) -> PromptSet:
    """Read and validate a prompt-set JSON file. Weights are renormalized."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PromptSetError(f"{path}: invalid JSON ({exc})") from exc
    return PromptSet.from_dict(doc)


def make_prompt_set(
    depths: Sequence[int],
    rng: np.random.Generator | int = 0,
    max_operand: int = 9,
    prefix: str = "p",
) -> PromptSet:
    """Build a uniformly weighted prompt set with the given required depths."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    prompts = []
    for i, d in enumerate(depths):
        ops = tuple(int(x) for x in rng.integers(1, max_operand + 1, size=int(d)))
        prompts.append(
            PromptInstance(id=f"{prefix}{i}", required_depth=int(d), operands=ops, answer=sum(ops))
        )
    return PromptSet(prompts)


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceSample:
    prompt_id: str
    latent_depth: int
    latent_redundancy: int
    text: str
    token_count: int
    extracted_answer: int | None
    correct: bool
    malformed: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "latent_depth": self.latent_depth,
            "latent_redundancy": self.latent_redundancy,
            "text": self.text,
            "token_count": self.token_count,
            "extracted_answer": self.extracted_answer,
            "correct": self.correct,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TraceSample":
        ans = d.get("extracted_answer")
        return cls(
            prompt_id=str(d["prompt_id"]),
            latent_depth=int(d["latent_depth"]),
            latent_redundancy=int(d["latent_redundancy"]),
            text=str(d["text"]),
            token_count=int(d["token_count"]),
            extracted_answer=None if ans is None else int(ans),
            correct=bool(d["correct"]),
        )


def population_stats(values: Sequence[float] | np.ndarray) -> tuple[float, float]:
    """Mean and divide-by-n standard deviation."""
    arr = np.asarray(values, dtype=float)
    return float(np.mean(arr)), float(np.std(arr))


@dataclass(frozen=True)
class RolloutGroup:
    """``k`` samples for one prompt.

    ``bucket`` records which row of the policy's logit matrices produced the
    samples; the gradient estimators need it.
    """

    prompt_id: str
    samples: tuple[TraceSample, ...]
    len_mean: float
    len_std: float
    bucket: int = 0

    @classmethod
    def from_samples(
        cls, prompt_id: str, samples: Iterable[TraceSample], bucket: int = 0
    ) -> "RolloutGroup":
        samples = tuple(samples)
        if not samples:
            raise ValueError("a rollout group needs at least one sample")
        if any(s.prompt_id != prompt_id for s in samples):
            raise ValueError(f"samples in group {prompt_id!r} belong to other prompts")
        mean, std = population_stats([s.token_count for s in samples])
        return cls(prompt_id, samples, mean, std, bucket)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([s.token_count for s in self.samples], dtype=float)

    @property
    def depths(self) -> np.ndarray:
        return np.array([s.latent_depth for s in self.samples], dtype=np.intp)

    @property
    def redundancies(self) -> np.ndarray:
        return np.array([s.latent_redundancy for s in self.samples], dtype=np.intp)

    @property
    def correct(self) -> np.ndarray:
        return np.array([s.correct for s in self.samples], dtype=float)

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "samples": [s.to_dict() for s in self.samples],
            "len_mean": self.len_mean,
            "len_std": self.len_std,
            "bucket": self.bucket,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RolloutGroup":
        return cls(
            prompt_id=str(d["prompt_id"]),
            samples=tuple(TraceSample.from_dict(s) for s in d["samples"]),
            len_mean=float(d["len_mean"]),
            len_std=float(d["len_std"]),
            bucket=int(d.get("bucket", 0)),
        )


# ---------------------------------------------------------------------------
# policy parameters
# ---------------------------------------------------------------------------


def _frozen_matrix(a: Any) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"logits must be a vector or a matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Depth logits ``u`` and redundancy logits ``v``.

    Both are stored as matrices with one row per difficulty bucket; the
    global (unconditioned) policy has a single row.
    """

    depth_logits: np.ndarray
    redundancy_logits: np.ndarray

    def __post_init__(self) -> None:
        u = _frozen_matrix(self.depth_logits)
        v = _frozen_matrix(self.redundancy_logits)
        if u.shape[0] != v.shape[0]:
            raise ValueError("depth and redundancy logits need the same number of buckets")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("policy logits must be finite")
        object.__setattr__(self, "depth_logits", u)
        object.__setattr__(self, "redundancy_logits", v)

    @classmethod
    def uniform(cls, s_max: int, r_max: int, n_buckets: int = 1) -> "PolicyParams":
        return cls(np.zeros((n_buckets, s_max)), np.zeros((n_buckets, r_max + 1)))

    @property
    def n_buckets(self) -> int:
        return self.depth_logits.shape[0]

    @property
    def s_max(self) -> int:
        return self.depth_logits.shape[1]

    @property
    def r_max(self) -> int:
        return self.redundancy_logits.shape[1] - 1

    @property
    def size(self) -> int:
        return self.depth_logits.size + self.redundancy_logits.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.depth_logits.ravel(), self.redundancy_logits.ravel()])

    def with_flat(self, theta: np.ndarray) -> "PolicyParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"expected a vector of length {self.size}, got shape {theta.shape}")
        n = self.depth_logits.size
        return PolicyParams(
            theta[:n].reshape(self.depth_logits.shape),
            theta[n:].reshape(self.redundancy_logits.shape),
        )

    def depth_probs(self, bucket: int = 0) -> np.ndarray:
        return softmax(self.depth_logits[bucket])

    def redundancy_probs(self, bucket: int = 0) -> np.ndarray:
        return softmax(self.redundancy_logits[bucket])

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, PolicyParams)
            and np.array_equal(self.depth_logits, other.depth_logits)
            and np.array_equal(self.redundancy_logits, other.redundancy_logits)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "depth_logits": self.depth_logits.tolist(),
            "redundancy_logits": self.redundancy_logits.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PolicyParams":
        return cls(np.array(d["depth_logits"], dtype=float), np.array(d["redundancy_logits"], dtype=float))


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=float)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=float)
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# reference snapshot and trainer state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceSnapshot:
    params: PolicyParams
    per_prompt_accuracy: Mapping[str, float]
    per_prompt_len_stats: Mapping[str, tuple[float, float]]
    rollouts_used: int

    def __post_init__(self) -> None:
        for pid, a in self.per_prompt_accuracy.items():
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"reference accuracy for {pid!r} outside [0, 1]: {a}")
        for pid, (_, sd) in self.per_prompt_len_stats.items():
            if sd < 0:
                raise ValueError(f"negative length std for {pid!r}")
        object.__setattr__(self, "per_prompt_accuracy", dict(self.per_prompt_accuracy))
        object.__setattr__(
            self,
            "per_prompt_len_stats",
            {k: (float(m), float(s)) for k, (m, s) in self.per_prompt_len_stats.items()},
        )

    def mean_accuracy(self, prompt_ids: Iterable[str]) -> float:
        vals = [self.per_prompt_accuracy[p] for p in prompt_ids]
        return float(np.mean(vals))

    def to_dict(self) -> dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "per_prompt_accuracy": dict(self.per_prompt_accuracy),
            "per_prompt_len_stats": {k: list(v) for k, v in self.per_prompt_len_stats.items()},
            "rollouts_used": self.rollouts_used,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ReferenceSnapshot":
        return cls(
            params=PolicyParams.from_dict(d["params"]),
            per_prompt_accuracy={k: float(v) for k, v in d["per_prompt_accuracy"].items()},
            per_prompt_len_stats={k: (float(v[0]), float(v[1])) for k, v in d["per_prompt_len_stats"].items()},
            rollouts_used=int(d["rollouts_used"]),
        )


class Stage(str, enum.Enum):
    STAGE_I = "stage_i"
    STAGE_II = "stage_ii"
    PRIMAL_DUAL = "primal_dual"


DECISION_BUFFER = 32


@dataclass(frozen=True)
class TrainerState:
    step: int
    stage: Stage
    params: PolicyParams
    dual_lambda: float = 0.0
    rng_state: Mapping[str, int] = field(default_factory=dict)
    last_decisions: tuple[str, ...] = ()
    length_history: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not self.dual_lambda >= 0:
            raise ValueError(f"dual variable must be >= 0, got {self.dual_lambda}")
        object.__setattr__(self, "stage", Stage(self.stage))

    def advance(self, **changes: Any) -> "TrainerState":
        """Copy with ``step`` incremented by one and ``changes`` applied."""
        return dataclasses.replace(self, step=self.step + 1, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "stage": self.stage.value,
            "params": self.params.to_dict(),
            "dual_lambda": self.dual_lambda,
            "rng_state": dict(self.rng_state),
            "last_decisions": list(self.last_decisions),
            "length_history": list(self.length_history),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainerState":
        return cls(
            step=int(d["step"]),
            stage=Stage(d["stage"]),
            params=PolicyParams.from_dict(d["params"]),
            dual_lambda=float(d["dual_lambda"]),
            rng_state=dict(d.get("rng_state", {})),
            last_decisions=tuple(d.get("last_decisions", ())),
            length_history=tuple(float(x) for x in d.get("length_history", ())),
        )


@dataclass(frozen=True)
class HyperParams:
    """Training knobs. Defaults are sized for sub-minute desk runs."""

    epsilon: float = 0.02
    eta_slack: float = 0.01
    delta: float = 0.02
    eta_len: float = 0.01
    lr_theta: float = 0.05
    lr_lambda: float = 0.1
    lambda_init: float = 0.0
    batch_size: int = 16
    rollouts_per_prompt: int = 16
    total_steps: int = 2000
    stage1_budget: int | None = 1000
    saturation_window: int | None = None
    saturation_tol: float = 0.01
    ref_rollouts: int = 64
    fresh_reference_rollouts: bool = False
    accuracy_baseline: str = "group_mean"
    length_baseline: str = "group_mean"
    variance_floor: float = 1e-8

    def __post_init__(self) -> None:
        checks = [
            (self.epsilon >= 0, "epsilon must be >= 0"),
            (self.eta_slack > 0, "eta_slack must be > 0"),
            (self.delta >= 0, "delta must be >= 0"),
            (self.eta_len > 0, "eta_len must be > 0"),
            (self.lr_theta > 0, "lr_theta must be > 0"),
            (self.lr_lambda > 0, "lr_lambda must be > 0"),
            (self.lambda_init >= 0, "lambda_init must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.rollouts_per_prompt >= 2, "rollouts_per_prompt must be >= 2"),
            (self.total_steps >= 0, "total_steps must be >= 0"),
            (self.stage1_budget is None or self.stage1_budget >= 0, "stage1_budget must be >= 0"),
            (self.saturation_window is None or self.saturation_window >= 1, "saturation_window must be >= 1"),
            (self.ref_rollouts >= 2, "ref_rollouts must be >= 2"),
            (self.variance_floor > 0, "variance_floor must be > 0"),
            (self.accuracy_baseline in ("none", "group_mean"), "accuracy_baseline must be none|group_mean"),
            (self.length_baseline in ("none", "group_mean"), "length_baseline must be none|group_mean"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "HyperParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)
