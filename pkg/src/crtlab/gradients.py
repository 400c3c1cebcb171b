"""Score-function gradient estimators and their exact enumeration oracles.

Parameter vectors are laid out as ``PolicyParams.flat()``: the depth-logit
matrix (bucket-major) followed by the redundancy-logit matrix.

The ``group_mean`` baseline subtracts the group mean of the objective and
rescales by ``k / (k - 1)``. That equals a leave-one-out baseline, so the
estimator stays unbiased for the gradient of the expectation.
"""

from __future__ import annotations

import enum
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .core import PolicyParams, PromptInstance, PromptSet, RolloutGroup
from .env import EnvConfig, bucket_of, check_params
from .exceptions import NumericError
from .normalization import NormStatsSource, logistic, normalize_lengths, standardize


class Objective(str, enum.Enum):
    ACCURACY = "accuracy"
    NORMALIZED_LENGTH = "normalized_length"


class Baseline(str, enum.Enum):
    NONE = "none"
    GROUP_MEAN = "group_mean"


@dataclass(frozen=True)
class ObjectiveKind:
    kind: Objective = Objective.ACCURACY
    baseline: Baseline = Baseline.GROUP_MEAN

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Objective(self.kind))
        object.__setattr__(self, "baseline", Baseline(self.baseline))


ACCURACY = ObjectiveKind(Objective.ACCURACY)
NORMALIZED_LENGTH = ObjectiveKind(Objective.NORMALIZED_LENGTH)


def _objective_values(group: RolloutGroup, objective: ObjectiveKind, norm_source: NormStatsSource) -> np.ndarray:
    if objective.kind is Objective.ACCURACY:
        return group.correct
    return normalize_lengths(group, norm_source)


def _advantages(f: np.ndarray, baseline: Baseline) -> np.ndarray:
    if baseline is Baseline.NONE:
        return f
    k = f.shape[0]
    if k < 2:
        raise ValueError("the group-mean baseline needs at least 2 rollouts per group")
    return (f - f.mean()) * (k / (k - 1))


def group_contributions(
    params: PolicyParams,
    batch: Sequence[RolloutGroup],
    objective: ObjectiveKind,
    norm_source: NormStatsSource,
) -> tuple[np.ndarray, int]:
    """Per-group sums of ``advantage * score``; shape ``(len(batch), P)``.

    Returns the matrix and the total sample count ``N``.
    """
    if not batch:
        raise ValueError("empty batch")
    nb, S = params.depth_logits.shape
    R1 = params.redundancy_logits.shape[1]
    n_depth = nb * S
    pu = np.stack([params.depth_probs(b) for b in range(nb)])
    pv = np.stack([params.redundancy_probs(b) for b in range(nb)])
    out = np.zeros((len(batch), params.size))
    n_total = 0
    for gi, g in enumerate(batch):
        b = g.bucket
        if not 0 <= b < nb:
            raise ValueError(f"group {g.prompt_id!r} uses bucket {b}; policy has {nb}")
        s = g.depths - 1
        r = g.redundancies
        if s.min() < 0 or s.max() >= S or r.min() < 0 or r.max() >= R1:
            raise ValueError(f"rollout latents of {g.prompt_id!r} do not fit the policy dimensions")
        adv = _advantages(_objective_values(g, objective, norm_source), objective.baseline)
        total = adv.sum()
        # sum_i adv_i (e_{s_i} - p) = bincount(s, adv) - total * p
        du = np.bincount(s, weights=adv, minlength=S) - total * pu[b]
        dv = np.bincount(r, weights=adv, minlength=R1) - total * pv[b]
        out[gi, b * S:(b + 1) * S] = du
        out[gi, n_depth + b * R1:n_depth + (b + 1) * R1] = dv
        n_total += len(g)
    return out, n_total


def estimate_gradient(
    params: PolicyParams,
    batch: Sequence[RolloutGroup],
    objective: ObjectiveKind,
    norm_source: NormStatsSource | None = None,
) -> np.ndarray:
    """``(1/N) sum_i A_i * grad log pi(y_i)`` over all rollouts in ``batch``.

    Groups are reduced in the order given, so the result is bitwise
    reproducible for a fixed batch.
    """
    contrib, n = group_contributions(params, batch, objective, norm_source or NormStatsSource.live())
    return contrib.sum(axis=0) / n


def estimate_gradient_with_se(
    params: PolicyParams,
    batch: Sequence[RolloutGroup],
    objective: ObjectiveKind,
    norm_source: NormStatsSource | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Estimate plus component-wise standard errors, treating groups as i.i.d."""
    contrib, n = group_contributions(params, batch, objective, norm_source or NormStatsSource.live())
    m = contrib.shape[0]
    if m < 2:
        raise ValueError("standard errors need at least two groups")
    est = contrib.sum(axis=0) / n
    se = contrib.std(axis=0, ddof=1) * np.sqrt(m) / n
    return est, se


# ---------------------------------------------------------------------------
# enumeration oracle
# ---------------------------------------------------------------------------


def value_table(
    prompt: PromptInstance, objective: ObjectiveKind, env: EnvConfig, norm_source: NormStatsSource | None
) -> np.ndarray:
    """``f(s, r)`` on the whole latent grid, indexed ``[s - 1, r]``."""
    if objective.kind is Objective.ACCURACY:
        s = np.arange(1, env.s_max + 1)
        col = (s >= prompt.required_depth).astype(float)
        return np.repeat(col[:, None], env.r_max + 1, axis=1)
    if norm_source is None:
        norm_source = NormStatsSource.live()
    norm_source.require_frozen()
    mean, std = norm_source.lookup(prompt.id)
    return logistic(standardize(env.length_grid(), mean, std, norm_source.variance_floor))


def exact_expectation(params: PolicyParams, bucket: int, table: np.ndarray) -> float:
    pu = params.depth_probs(bucket)
    pv = params.redundancy_probs(bucket)
    return float(pu @ table @ pv)


def exact_expectation_gradient(params: PolicyParams, bucket: int, table: np.ndarray) -> np.ndarray:
    """Gradient of ``E[table[s, r]]`` through both softmaxes."""
    pu = params.depth_probs(bucket)
    pv = params.redundancy_probs(bucket)
    row = table @ pv  # E[f | s]
    col = pu @ table  # E[f | r]
    mean = float(pu @ row)
    nb, S = params.depth_logits.shape
    R1 = params.redundancy_logits.shape[1]
    g = np.zeros(params.size)
    g[bucket * S:(bucket + 1) * S] = pu * (row - mean)
    g[nb * S + bucket * R1:nb * S + (bucket + 1) * R1] = pv * (col - mean)
    return g


def exact_objective(
    params: PolicyParams,
    prompt: PromptInstance,
    objective: ObjectiveKind,
    env: EnvConfig,
    norm_source: NormStatsSource | None = None,
) -> float:
    """``sum_{s,r} pi(s, r) f(s, r)`` for a single prompt."""
    check_params(params, env)
    return exact_expectation(params, bucket_of(prompt, env), value_table(prompt, objective, env, norm_source))


def exact_gradient(
    params: PolicyParams,
    prompt: PromptInstance,
    objective: ObjectiveKind,
    env: EnvConfig,
    norm_source: NormStatsSource | None = None,
) -> np.ndarray:
    check_params(params, env)
    table = value_table(prompt, objective, env, norm_source)
    return exact_expectation_gradient(params, bucket_of(prompt, env), table)


def expected_over_prompts(
    params: PolicyParams,
    prompts: PromptSet,
    env: EnvConfig,
    table_fn: Callable[[PromptInstance], np.ndarray],
) -> float:
    """Weighted mean over ``prompts`` of an exact per-prompt expectation."""
    check_params(params, env)
    vals = [exact_expectation(params, bucket_of(p, env), table_fn(p)) for p in prompts]
    return float(np.dot(prompts.weights, vals))


def expected_accuracy(params: PolicyParams, prompts: PromptSet, env: EnvConfig) -> float:
    return expected_over_prompts(params, prompts, env, lambda p: value_table(p, ACCURACY, env, None))


def expected_length(params: PolicyParams, prompts: PromptSet, env: EnvConfig) -> float:
    """Exact expected raw token count."""
    grid = env.length_grid()
    return expected_over_prompts(params, prompts, env, lambda p: grid)


def expected_normalized_length(
    params: PolicyParams, prompts: PromptSet, env: EnvConfig, norm_source: NormStatsSource
) -> float:
    return expected_over_prompts(
        params, prompts, env, lambda p: value_table(p, NORMALIZED_LENGTH, env, norm_source)
    )


def finite_difference_gradient(
    fn: Callable[[PolicyParams], float], params: PolicyParams, h: float = 1e-5
) -> np.ndarray:
    """Central differences of ``fn`` around ``params``, one coordinate at a time."""
    theta = params.flat()
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        grad[j] = (fn(params.with_flat(tp)) - fn(params.with_flat(tm))) / (2 * h)
    return grad


# ---------------------------------------------------------------------------
# update
# ---------------------------------------------------------------------------


def sgd_step(params: PolicyParams, gradient: np.ndarray, lr: float, direction: str) -> PolicyParams:
    """Plain gradient step; ``direction`` is ``"ascent"`` or ``"descent"``."""
    if direction not in ("ascent", "descent"):
        raise ValueError(f"direction must be 'ascent' or 'descent', got {direction!r}")
    if not lr > 0:
        raise ValueError("learning rate must be > 0")
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != (params.size,):
        raise ValueError(f"gradient has shape {gradient.shape}; expected ({params.size},)")
    if not np.all(np.isfinite(gradient)):
        raise NumericError("non-finite gradient; step refused")
    sign = 1.0 if direction == "ascent" else -1.0
    return params.with_flat(params.flat() + sign * lr * gradient)
