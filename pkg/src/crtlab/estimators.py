"""scikit-learn style front end.

``LengthNormalizer`` is a transformer over rollout groups; ``CRTPolicy``
trains a latent-depth policy on a prompt set with ``fit`` and exposes the
exact enumeration oracle through ``score`` and ``expected_length``.
"""

from __future__ import annotations

from typing import Any

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import HyperParams, PolicyParams, RolloutGroup, population_stats
from .env import EnvConfig, sample_group
from .gradients import expected_accuracy, expected_length
from .normalization import DEFAULT_VARIANCE_FLOOR, NormStatsSource, normalize_lengths
from .trainer import EVAL_STREAM, Mode, TrainingRun, derive_rng
from .validation import check_env, check_groups, check_positive_int, check_prompt_set, check_seed


class LengthNormalizer(TransformerMixin, BaseEstimator):
    """Map raw trace lengths to normalized lengths in (0, 1).

    With ``mode="frozen"``, ``fit`` pools the groups per prompt and stores
    their (mean, population std); ``transform`` then uses those fixed
    statistics. With ``mode="live"`` each group is standardized by its own
    statistics and ``fit`` only records the prompt ids.
    """

    def __init__(self, mode: str = "frozen", variance_floor: float = DEFAULT_VARIANCE_FLOOR):
        self.mode = mode
        self.variance_floor = variance_floor

    def fit(self, groups, y=None):
        if self.mode not in ("frozen", "live"):
            raise ValueError(f"mode must be 'frozen' or 'live', got {self.mode!r}")
        groups = check_groups(groups, min_size=1)
        pooled: dict[str, list[float]] = {}
        for g in groups:
            pooled.setdefault(g.prompt_id, []).extend(g.lengths.tolist())
        if self.mode == "frozen":
            short = [pid for pid, ls in pooled.items() if len(ls) < 2]
            if short:
                raise ValueError(f"need >= 2 rollouts per prompt to freeze stats: {short[:5]}")
            self.stats_ = {pid: population_stats(ls) for pid, ls in pooled.items()}
        else:
            self.stats_ = {}
        self.prompt_ids_ = sorted(pooled)
        return self

    def _source(self) -> NormStatsSource:
        if self.mode == "frozen":
            return NormStatsSource.frozen(self.stats_, self.variance_floor)
        return NormStatsSource.live(self.variance_floor)

    def transform(self, groups) -> np.ndarray:
        """Concatenated normalized lengths, group by group in sample order."""
        check_is_fitted(self, "stats_")
        groups = check_groups(groups)
        src = self._source()
        return np.concatenate([normalize_lengths(g, src) for g in groups])


class CRTPolicy(BaseEstimator):
    """Latent-depth reasoning policy trained by constraint-rectified updates.

    Hyperparameters mirror :class:`~crtlab.core.HyperParams`; ``env`` is an
    ``EnvConfig`` (or its dict form) and ``init_params`` /
    ``reference_params`` optionally override the starting and reference
    policies.
    """

    def __init__(
        self,
        env: EnvConfig | dict | None = None,
        mode: str = "crt_two_stage",
        epsilon: float = 0.02,
        eta_slack: float = 0.01,
        delta: float = 0.02,
        eta_len: float = 0.01,
        lr_theta: float = 0.05,
        lr_lambda: float = 0.1,
        lambda_init: float = 0.0,
        batch_size: int = 16,
        rollouts_per_prompt: int = 16,
        total_steps: int = 2000,
        stage1_budget: int | None = 1000,
        saturation_window: int | None = None,
        saturation_tol: float = 0.01,
        ref_rollouts: int = 64,
        fresh_reference_rollouts: bool = False,
        accuracy_baseline: str = "group_mean",
        length_baseline: str = "group_mean",
        variance_floor: float = DEFAULT_VARIANCE_FLOOR,
        init_params: PolicyParams | None = None,
        reference_params: PolicyParams | None = None,
        random_state: int | None = 0,
    ):
        self.env = env
        self.mode = mode
        self.epsilon = epsilon
        self.eta_slack = eta_slack
        self.delta = delta
        self.eta_len = eta_len
        self.lr_theta = lr_theta
        self.lr_lambda = lr_lambda
        self.lambda_init = lambda_init
        self.batch_size = batch_size
        self.rollouts_per_prompt = rollouts_per_prompt
        self.total_steps = total_steps
        self.stage1_budget = stage1_budget
        self.saturation_window = saturation_window
        self.saturation_tol = saturation_tol
        self.ref_rollouts = ref_rollouts
        self.fresh_reference_rollouts = fresh_reference_rollouts
        self.accuracy_baseline = accuracy_baseline
        self.length_baseline = length_baseline
        self.variance_floor = variance_floor
        self.init_params = init_params
        self.reference_params = reference_params
        self.random_state = random_state

    def hyper_params(self) -> HyperParams:
        names = HyperParams.__dataclass_fields__
        return HyperParams(**{k: v for k, v in self.get_params(deep=False).items() if k in names})

    def fit(self, X, y=None):
        """Train on prompt set ``X``. ``y`` is ignored (answers live in the prompts)."""
        env = check_env(self.env)
        prompts = check_prompt_set(X, env.s_max)
        run = TrainingRun.start(
            prompts, env, self.hyper_params(), Mode(self.mode), check_seed(self.random_state),
            init_params=self.init_params, reference_params=self.reference_params,
        )
        run.run()
        self.env_ = env
        self.params_ = run.state.params
        self.reference_ = run.context.reference
        self.context_ = run.context
        self.state_ = run.state
        self.history_ = run.history
        self.n_steps_ = run.state.step
        return self

    def _fitted_env(self) -> EnvConfig:
        check_is_fitted(self, "params_")
        return self.env_

    def sample(self, X, k: int = 16, random_state: int | None = None) -> list[RolloutGroup]:
        """``k`` rollouts per prompt from the fitted policy."""
        env = self._fitted_env()
        prompts = check_prompt_set(X, env.s_max)
        k = check_positive_int(k, "k")
        seed = check_seed(self.random_state if random_state is None else random_state)
        rng = derive_rng(seed, EVAL_STREAM, 0)
        return [sample_group(self.params_, p, env, k, rng) for p in prompts]

    def predict(self, X) -> np.ndarray:
        """One sampled answer per prompt (``-1`` marks an unparseable trace)."""
        groups = self.sample(X, k=1)
        return np.array(
            [g.samples[0].extracted_answer if g.samples[0].extracted_answer is not None else -1 for g in groups]
        )

    def score(self, X, y=None) -> float:
        """Exact expected accuracy over ``X`` (weighted by prompt weight)."""
        env = self._fitted_env()
        return expected_accuracy(self.params_, check_prompt_set(X, env.s_max), env)

    def expected_length(self, X) -> float:
        env = self._fitted_env()
        return expected_length(self.params_, check_prompt_set(X, env.s_max), env)

    def length_reduction(self, X) -> float:
        """Fractional drop in exact expected length versus the reference policy."""
        env = self._fitted_env()
        prompts = check_prompt_set(X, env.s_max)
        base = expected_length(self.reference_.params, prompts, env)
        return 1.0 - expected_length(self.params_, prompts, env) / base

    def summary(self) -> dict[str, Any]:
        self._fitted_env()
        return {
            "steps": self.n_steps_,
            "stage": self.state_.stage.value,
            "dual_lambda": self.state_.dual_lambda,
            "stage1_end_step": self.context_.stage1_end_step,
        }
