"""Constraint-rectified training, its two-stage scheduler and a primal-dual
baseline, all driven over the synthetic environment.

Every step draws its randomness from a stream derived from
``(seed, purpose, step)``; nothing else carries RNG state across steps, which
is what makes checkpoint resume exact.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .core import (
    DECISION_BUFFER,
    HyperParams,
    PolicyParams,
    PromptInstance,
    PromptSet,
    ReferenceSnapshot,
    RolloutGroup,
    Stage,
    TrainerState,
)
from .env import EnvConfig, check_params, sample_group
from .exceptions import ConfigError, NumericError
from .gradients import (
    Baseline,
    Objective,
    ObjectiveKind,
    estimate_gradient,
    expected_normalized_length,
    sgd_step,
)
from .normalization import NormStatsSource, freeze_stats, normalize_lengths

logger = logging.getLogger(__name__)

# stream purposes for derive_rng
STEP_STREAM = 0
REFERENCE_STREAM = 1
EVAL_STREAM = 2


def derive_rng(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, index)))


class Branch(str, enum.Enum):
    RECTIFY_ACCURACY = "rectify_accuracy"
    SHORTEN_LENGTH = "shorten_length"
    RECTIFY_LENGTH = "rectify_length"
    IMPROVE_ACCURACY = "improve_accuracy"
    PRIMAL_DUAL = "primal_dual"


class Mode(str, enum.Enum):
    CRT_TWO_STAGE = "crt_two_stage"
    CRT_STAGE1_ONLY = "crt_stage1_only"
    PRIMAL_DUAL = "primal_dual"


@dataclass(frozen=True)
class SwitchDecision:
    branch: Branch
    acc_current: float
    acc_reference: float
    margin: float


def switching_decision(
    acc_current: float, acc_reference: float, epsilon: float, eta_slack: float
) -> SwitchDecision:
    """Rectify accuracy iff ``acc_current < acc_reference - epsilon - eta_slack``."""
    margin = acc_reference - epsilon - eta_slack
    # compare against the literal expression, not the stored margin, so ties
    # resolve exactly as the inequality is written
    if acc_current < acc_reference - epsilon - eta_slack:
        branch = Branch.RECTIFY_ACCURACY
    else:
        branch = Branch.SHORTEN_LENGTH
    return SwitchDecision(branch, acc_current, acc_reference, margin)


@dataclass(frozen=True)
class StageIIGuard:
    len_reference: float
    delta: float
    eta_len: float

    def __post_init__(self) -> None:
        if not 0.0 < self.len_reference < 1.0:
            raise ValueError(f"len_reference must lie in (0, 1), got {self.len_reference}")
        if self.delta < 0 or not self.eta_len > 0:
            raise ValueError("delta must be >= 0 and eta_len > 0")

    @property
    def threshold(self) -> float:
        return self.len_reference + self.delta + self.eta_len

    def violated(self, mean_lnorm: float) -> bool:
        return mean_lnorm > self.len_reference + self.delta + self.eta_len

    def to_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StageIIGuard":
        return cls(float(d["len_reference"]), float(d["delta"]), float(d["eta_len"]))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def sample_batch(
    params: PolicyParams,
    prompts: Sequence[PromptInstance],
    env: EnvConfig,
    k: int,
    rng: np.random.Generator,
) -> list[RolloutGroup]:
    return [sample_group(params, p, env, k, rng) for p in prompts]


def build_reference(
    params: PolicyParams,
    prompts: PromptSet,
    k_ref: int,
    env: EnvConfig,
    rng: np.random.Generator,
) -> ReferenceSnapshot:
    """Freeze ``params`` and record per-prompt accuracy and length stats from
    ``k_ref`` rollouts per prompt."""
    if len(prompts) == 0:
        raise ValueError("empty prompt set")
    groups = sample_batch(params, list(prompts), env, k_ref, rng)
    return freeze_stats(params, groups)


def _mean_correct(groups: Sequence[RolloutGroup]) -> float:
    return float(np.mean(np.concatenate([g.correct for g in groups])))


def _mean_len(groups: Sequence[RolloutGroup]) -> float:
    return float(np.mean(np.concatenate([g.lengths for g in groups])))


def _mean_lnorm(groups: Sequence[RolloutGroup], source: NormStatsSource) -> float:
    return float(np.mean(np.concatenate([normalize_lengths(g, source) for g in groups])))


def _objective(kind: Objective, baseline: str) -> ObjectiveKind:
    return ObjectiveKind(kind, Baseline(baseline))


def _reference_accuracy(
    reference: ReferenceSnapshot,
    batch_prompts: Sequence[PromptInstance],
    hp: HyperParams,
    env: EnvConfig,
    rng: np.random.Generator,
) -> float:
    if hp.fresh_reference_rollouts:
        groups = sample_batch(reference.params, batch_prompts, env, hp.rollouts_per_prompt, rng)
        return _mean_correct(groups)
    return reference.mean_accuracy(p.id for p in batch_prompts)


def _history(state: TrainerState, mean_len: float, hp: HyperParams) -> tuple[float, ...]:
    keep = 2 * (hp.saturation_window or 50)
    return (state.length_history + (mean_len,))[-keep:]


def _decisions(state: TrainerState, branch: Branch) -> tuple[str, ...]:
    return (state.last_decisions + (branch.value,))[-DECISION_BUFFER:]


def _try_step(params: PolicyParams, grad: np.ndarray, lr: float, direction: str) -> tuple[PolicyParams, bool]:
    try:
        return sgd_step(params, grad, lr, direction), False
    except NumericError:
        logger.warning("non-finite gradient; parameters left unchanged")
        return params, True


def _record(state: TrainerState, branch: Branch, acc: float, acc_ref: float | None,
            mean_len: float, mean_lnorm: float, lam: float, refused: bool) -> dict[str, Any]:
    rec = {
        "step": state.step,
        "stage": state.stage.value,
        "branch": branch.value,
        "acc": acc,
        "acc_ref": acc_ref,
        "mean_len": mean_len,
        "mean_lnorm": mean_lnorm,
        "lambda": lam,
    }
    if refused:
        rec["refused"] = True
    return rec


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def crt_step(
    state: TrainerState,
    reference: ReferenceSnapshot,
    prompts: PromptSet,
    hp: HyperParams,
    env: EnvConfig,
    rng: np.random.Generator,
) -> tuple[TrainerState, dict[str, Any]]:
    """One Stage I update: shorten when accuracy holds, otherwise rectify it."""
    if state.stage is not Stage.STAGE_I:
        raise ValueError(f"crt_step needs a Stage I state, got {state.stage.value}")
    batch_prompts = prompts.sample(rng, hp.batch_size)
    groups = sample_batch(state.params, batch_prompts, env, hp.rollouts_per_prompt, rng)
    acc = _mean_correct(groups)
    acc_ref = _reference_accuracy(reference, batch_prompts, hp, env, rng)
    decision = switching_decision(acc, acc_ref, hp.epsilon, hp.eta_slack)
    live = NormStatsSource.live(hp.variance_floor)
    if decision.branch is Branch.RECTIFY_ACCURACY:
        grad = estimate_gradient(state.params, groups, _objective(Objective.ACCURACY, hp.accuracy_baseline), live)
        params, refused = _try_step(state.params, grad, hp.lr_theta, "ascent")
    else:
        grad = estimate_gradient(
            state.params, groups, _objective(Objective.NORMALIZED_LENGTH, hp.length_baseline), live
        )
        params, refused = _try_step(state.params, grad, hp.lr_theta, "descent")
    mean_len = _mean_len(groups)
    rec = _record(state, decision.branch, acc, acc_ref, mean_len, _mean_lnorm(groups, live),
                  state.dual_lambda, refused)
    new = state.advance(
        params=params,
        last_decisions=_decisions(state, decision.branch),
        length_history=_history(state, mean_len, hp),
    )
    return new, rec


def stage_transition(state: TrainerState, hp: HyperParams) -> bool:
    """Whether Stage I is done: budget exhausted or length improvement saturated.

    Saturation compares the mean raw length of the last ``W`` steps with the
    ``W`` steps before; a relative decrease below ``saturation_tol`` ends the
    stage.
    """
    if state.stage is not Stage.STAGE_I:
        return False
    if hp.stage1_budget is not None and state.step >= hp.stage1_budget:
        return True
    w = hp.saturation_window
    if w is not None and len(state.length_history) >= 2 * w:
        hist = np.asarray(state.length_history[-2 * w:])
        prev, last = hist[:w].mean(), hist[w:].mean()
        if prev <= 0:
            return True
        return (prev - last) / prev < hp.saturation_tol
    return False


def stage2_step(
    state: TrainerState,
    guard: StageIIGuard,
    frozen: NormStatsSource,
    prompts: PromptSet,
    hp: HyperParams,
    env: EnvConfig,
    rng: np.random.Generator,
) -> tuple[TrainerState, dict[str, Any]]:
    """One Stage II update: raise accuracy unless the frozen-stat length
    constraint is violated, in which case shorten."""
    if state.stage is not Stage.STAGE_II:
        raise ValueError(f"stage2_step needs a Stage II state, got {state.stage.value}")
    frozen.require_frozen()
    batch_prompts = prompts.sample(rng, hp.batch_size)
    groups = sample_batch(state.params, batch_prompts, env, hp.rollouts_per_prompt, rng)
    lnorm = _mean_lnorm(groups, frozen)
    acc = _mean_correct(groups)
    if guard.violated(lnorm):
        branch = Branch.RECTIFY_LENGTH
        grad = estimate_gradient(
            state.params, groups, _objective(Objective.NORMALIZED_LENGTH, hp.length_baseline), frozen
        )
        params, refused = _try_step(state.params, grad, hp.lr_theta, "descent")
    else:
        branch = Branch.IMPROVE_ACCURACY
        grad = estimate_gradient(state.params, groups, _objective(Objective.ACCURACY, hp.accuracy_baseline), frozen)
        params, refused = _try_step(state.params, grad, hp.lr_theta, "ascent")
    mean_len = _mean_len(groups)
    rec = _record(state, branch, acc, None, mean_len, lnorm, state.dual_lambda, refused)
    new = state.advance(
        params=params,
        last_decisions=_decisions(state, branch),
        length_history=_history(state, mean_len, hp),
    )
    return new, rec


def pd_step(
    state: TrainerState,
    reference: ReferenceSnapshot,
    prompts: PromptSet,
    hp: HyperParams,
    env: EnvConfig,
    rng: np.random.Generator,
) -> tuple[TrainerState, dict[str, Any]]:
    """Primal descent on ``mean lnorm + lambda * g`` then projected dual ascent,
    with residual ``g = (A_ref - epsilon) - A_t``."""
    if state.stage is not Stage.PRIMAL_DUAL:
        raise ValueError(f"pd_step needs a primal-dual state, got {state.stage.value}")
    lam = state.dual_lambda
    batch_prompts = prompts.sample(rng, hp.batch_size)
    groups = sample_batch(state.params, batch_prompts, env, hp.rollouts_per_prompt, rng)
    acc = _mean_correct(groups)
    acc_ref = _reference_accuracy(reference, batch_prompts, hp, env, rng)
    residual = (acc_ref - hp.epsilon) - acc
    live = NormStatsSource.live(hp.variance_floor)
    grad = estimate_gradient(state.params, groups, _objective(Objective.NORMALIZED_LENGTH, hp.length_baseline), live)
    if lam > 0:
        # residual depends on theta only through -A_t
        grad = grad - lam * estimate_gradient(
            state.params, groups, _objective(Objective.ACCURACY, hp.accuracy_baseline), live
        )
    params, refused = _try_step(state.params, grad, hp.lr_theta, "descent")
    new_lam = dual_update(lam, residual, hp.lr_lambda)
    mean_len = _mean_len(groups)
    rec = _record(state, Branch.PRIMAL_DUAL, acc, acc_ref, mean_len, _mean_lnorm(groups, live), lam, refused)
    rec["residual"] = residual
    new = state.advance(
        params=params,
        dual_lambda=new_lam,
        last_decisions=_decisions(state, Branch.PRIMAL_DUAL),
        length_history=_history(state, mean_len, hp),
    )
    return new, rec


def dual_update(lam: float, residual: float, lr_lambda: float) -> float:
    """Projected dual ascent ``max(0, lam + lr * residual)``."""
    out = max(0.0, lam + lr_lambda * residual)
    assert out >= 0.0
    return out


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass
class RunContext:
    """Frozen artifacts a run accumulates: the initial reference and, after
    the stage switch, the Stage I snapshot and its length guard."""

    reference: ReferenceSnapshot
    stage1_snapshot: ReferenceSnapshot | None = None
    guard: StageIIGuard | None = None
    stage1_end_step: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "reference": self.reference.to_dict(),
            "stage1_snapshot": None if self.stage1_snapshot is None else self.stage1_snapshot.to_dict(),
            "guard": None if self.guard is None else self.guard.to_dict(),
            "stage1_end_step": self.stage1_end_step,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunContext":
        snap = d.get("stage1_snapshot")
        guard = d.get("guard")
        return cls(
            reference=ReferenceSnapshot.from_dict(d["reference"]),
            stage1_snapshot=None if snap is None else ReferenceSnapshot.from_dict(snap),
            guard=None if guard is None else StageIIGuard.from_dict(guard),
            stage1_end_step=d.get("stage1_end_step"),
        )


@dataclass
class TrainingRun:
    """Mutable driver around the pure step functions."""

    prompts: PromptSet
    env: EnvConfig
    hp: HyperParams
    mode: Mode
    seed: int
    state: TrainerState
    context: RunContext
    history: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def start(
        cls,
        prompts: PromptSet,
        env: EnvConfig,
        hp: HyperParams,
        mode: Mode | str = Mode.CRT_TWO_STAGE,
        seed: int = 0,
        init_params: PolicyParams | None = None,
        reference_params: PolicyParams | None = None,
    ) -> "TrainingRun":
        mode = Mode(mode)
        params = init_params if init_params is not None else env.initial_params()
        check_params(params, env)
        for p in prompts:
            if p.required_depth > env.s_max:
                raise ConfigError(f"prompt {p.id!r} needs depth {p.required_depth} > S_max={env.s_max}")
        ref_params = reference_params if reference_params is not None else params
        check_params(ref_params, env)
        reference = build_reference(ref_params, prompts, hp.ref_rollouts, env, derive_rng(seed, REFERENCE_STREAM, 0))
        stage = Stage.PRIMAL_DUAL if mode is Mode.PRIMAL_DUAL else Stage.STAGE_I
        state = TrainerState(
            step=0,
            stage=stage,
            params=params,
            dual_lambda=hp.lambda_init if mode is Mode.PRIMAL_DUAL else 0.0,
            rng_state={"seed": seed, "step": 0},
        )
        run = cls(prompts, env, hp, mode, seed, state, RunContext(reference))
        # a zero budget switches before the first update
        run._maybe_switch()
        return run

    @property
    def done(self) -> bool:
        return self.state.step >= self.hp.total_steps

    def _maybe_switch(self) -> None:
        if self.mode is Mode.CRT_TWO_STAGE and stage_transition(self.state, self.hp):
            self.enter_stage2()

    def enter_stage2(self) -> None:
        """Freeze the current policy as the Stage I reference, freeze its
        normalization statistics and derive the length guard."""
        rng = derive_rng(self.seed, REFERENCE_STREAM, self.state.step + 1)
        snap = build_reference(self.state.params, self.prompts, self.hp.ref_rollouts, self.env, rng)
        frozen = NormStatsSource.frozen(snap, self.hp.variance_floor)
        len_ref = expected_normalized_length(snap.params, self.prompts, self.env, frozen)
        len_ref = float(np.clip(len_ref, 1e-12, 1 - 1e-12))
        guard = StageIIGuard(len_ref, self.hp.delta, self.hp.eta_len)
        self.context = dataclasses.replace(
            self.context, stage1_snapshot=snap, guard=guard, stage1_end_step=self.state.step
        )
        self.state = dataclasses.replace(self.state, stage=Stage.STAGE_II)
        logger.info("stage II from step %d, len_reference=%.4f", self.state.step, len_ref)

    def frozen_source(self) -> NormStatsSource:
        if self.context.stage1_snapshot is None:
            raise ValueError("no frozen statistics before the stage switch")
        return NormStatsSource.frozen(self.context.stage1_snapshot, self.hp.variance_floor)

    def step(self) -> dict[str, Any]:
        rng = derive_rng(self.seed, STEP_STREAM, self.state.step)
        st = self.state
        if st.stage is Stage.STAGE_I:
            new, rec = crt_step(st, self.context.reference, self.prompts, self.hp, self.env, rng)
        elif st.stage is Stage.STAGE_II:
            assert self.context.guard is not None
            new, rec = stage2_step(st, self.context.guard, self.frozen_source(), self.prompts, self.hp, self.env, rng)
        else:
            new, rec = pd_step(st, self.context.reference, self.prompts, self.hp, self.env, rng)
        self.state = dataclasses.replace(new, rng_state={"seed": self.seed, "step": new.step})
        self._maybe_switch()
        self.history.append(rec)
        return rec

    def iterate(self, n_steps: int | None = None) -> Iterator[dict[str, Any]]:
        stop = self.hp.total_steps if n_steps is None else min(self.hp.total_steps, self.state.step + n_steps)
        while self.state.step < stop:
            yield self.step()

    def run(self) -> list[dict[str, Any]]:
        for _ in self.iterate():
            pass
        return self.history
