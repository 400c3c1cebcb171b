"""Synthetic arithmetic-chain reasoning environment.

A trace is governed by two latents: the number of reasoning steps ``s`` and
the number of redundant verification blocks ``r``. Rendering is
deterministic and every line has a fixed whitespace-token count, so

    token_count(s, r) = tokens_per_step * s + tokens_per_redundancy * r + closing_tokens

exactly. A trace is correct iff ``s >= required_depth``.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Mapping

import numpy as np

from .core import PolicyParams, PromptInstance, RolloutGroup, TraceSample, log_softmax
from .exceptions import ConfigError, RangeError

MIN_STEP_TOKENS = 6
MIN_REDUNDANCY_TOKENS = 5
MIN_CLOSING_TOKENS = 2

_STEP_FILLER = ("so", "the", "running", "total", "is", "now")
_CHECK_FILLER = ("re-adding", "every", "step", "once", "more", "still", "gives")
_CLOSING_FILLER = ("Therefore,", "the", "final")

_ANSWER_RE = re.compile(r"Answer:\s*(-?\d+)\s*$")


@dataclass(frozen=True)
class EnvConfig:
    s_max: int = 6
    r_max: int = 4
    tokens_per_step: int = 8
    tokens_per_redundancy: int = 12
    closing_tokens: int = 2
    conditioning: str = "global"
    noise_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.s_max < 2:
            raise ConfigError("s_max must be >= 2")
        if self.r_max < 1:
            raise ConfigError("r_max must be >= 1")
        if self.tokens_per_step < MIN_STEP_TOKENS:
            raise ConfigError(f"tokens_per_step must be >= {MIN_STEP_TOKENS}")
        if self.tokens_per_redundancy < MIN_REDUNDANCY_TOKENS:
            raise ConfigError(f"tokens_per_redundancy must be >= {MIN_REDUNDANCY_TOKENS}")
        if self.closing_tokens < MIN_CLOSING_TOKENS:
            raise ConfigError(f"closing_tokens must be >= {MIN_CLOSING_TOKENS}")
        if self.conditioning not in ("global", "bucketed"):
            raise ConfigError("conditioning must be 'global' or 'bucketed'")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ConfigError("noise_prob must lie in [0, 1]")

    @property
    def n_buckets(self) -> int:
        return self.s_max if self.conditioning == "bucketed" else 1

    @property
    def grid_size(self) -> int:
        return self.s_max * (self.r_max + 1)

    def token_count(self, s, r):
        """Closed-form token count; works elementwise on arrays."""
        return self.tokens_per_step * s + self.tokens_per_redundancy * r + self.closing_tokens

    def length_grid(self) -> np.ndarray:
        """``(s_max, r_max + 1)`` table of token counts indexed by ``(s - 1, r)``."""
        s = np.arange(1, self.s_max + 1)[:, None]
        r = np.arange(self.r_max + 1)[None, :]
        return self.token_count(s, r).astype(float)

    def initial_params(self) -> PolicyParams:
        return PolicyParams.uniform(self.s_max, self.r_max, self.n_buckets)

    def to_dict(self) -> dict[str, Any]:
        return {
            "s_max": self.s_max,
            "r_max": self.r_max,
            "tokens_per_step": self.tokens_per_step,
            "tokens_per_redundancy": self.tokens_per_redundancy,
            "closing_tokens": self.closing_tokens,
            "conditioning": self.conditioning,
            "noise_prob": self.noise_prob,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EnvConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown env fields: {sorted(unknown)}")
        return cls(**d)


def bucket_of(prompt: PromptInstance, env: EnvConfig) -> int:
    """Row of the logit matrices used for ``prompt``.

    In bucketed mode the row is a difficulty hint: the true required depth,
    replaced by a uniformly random depth with probability ``noise_prob``.
    The coin flips are seeded by a checksum of the prompt id, so a prompt
    always lands in the same bucket.
    """
    if env.conditioning == "global":
        return 0
    g = np.random.default_rng(zlib.crc32(prompt.id.encode("utf-8")))
    hint = prompt.required_depth
    if g.random() < env.noise_prob:
        hint = int(g.integers(1, env.s_max + 1))
    return min(hint, env.s_max) - 1


def check_params(params: PolicyParams, env: EnvConfig) -> None:
    if params.s_max != env.s_max or params.r_max != env.r_max:
        raise ConfigError(
            f"policy has S_max={params.s_max}, R_max={params.r_max}; "
            f"environment expects S_max={env.s_max}, R_max={env.r_max}"
        )
    if params.n_buckets != env.n_buckets:
        raise ConfigError(
            f"policy has {params.n_buckets} bucket(s); environment expects {env.n_buckets}"
        )


# ---------------------------------------------------------------------------
# rendering and verification
# ---------------------------------------------------------------------------


def _pad(core_head: list[str], core_tail: list[str], filler: tuple[str, ...], n: int) -> str:
    extra = n - len(core_head) - len(core_tail)
    pad = [filler[i % len(filler)] for i in range(extra)]
    return " ".join(core_head + pad + core_tail)


def _step_line(j: int, op: int, total: int, n_tokens: int) -> str:
    return _pad(["Step", f"{j}:", "add", f"{op},"], ["total", f"{total}."], _STEP_FILLER, n_tokens)


def _check_block(total: int, n_tokens: int) -> str:
    return _pad(["Let", "me", "double-check:"], [f"{total},", "consistent."], _CHECK_FILLER, n_tokens)


def _closing_line(answer: int, n_tokens: int) -> str:
    return _pad([], ["Answer:", str(answer)], _CLOSING_FILLER, n_tokens)


def render_trace(s: int, r: int, prompt: PromptInstance, env: EnvConfig) -> str:
    """Deterministic trace text for latents ``(s, r)``.

    ``s`` step lines carry the running partial sum (steps past the prompt's
    depth add 0), ``r`` identical verification blocks restate it, and a final
    ``Answer:`` line reports it.
    """
    if not 1 <= s <= env.s_max:
        raise RangeError(f"depth s={s} outside [1, {env.s_max}]")
    if not 0 <= r <= env.r_max:
        raise RangeError(f"redundancy r={r} outside [0, {env.r_max}]")
    return _render_cached(int(s), int(r), prompt.operands, env.tokens_per_step,
                          env.tokens_per_redundancy, env.closing_tokens)


@lru_cache(maxsize=65536)
def _render_cached(s: int, r: int, operands: tuple[int, ...], a: int, b: int, c: int) -> str:
    lines = []
    total = 0
    for j in range(1, s + 1):
        op = operands[j - 1] if j <= len(operands) else 0
        total += op
        lines.append(_step_line(j, op, total, a))
    block = _check_block(total, b)
    lines.extend([block] * r)
    lines.append(_closing_line(total, c))
    return "\n".join(lines)


def count_tokens(text: str) -> int:
    return len(text.split())


def parse_answer(text: str) -> int | None:
    """Integer on the final ``Answer:`` line, or ``None`` if absent."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return None
    m = _ANSWER_RE.search(lines[-1])
    return int(m.group(1)) if m else None


def verify(trace: TraceSample, prompt: PromptInstance) -> tuple[bool, bool]:
    """Check a trace's final answer against the ground truth.

    Only the text is consulted. Returns ``(correct, malformed)``; a trace
    with no parseable answer line is malformed and counts as incorrect.
    """
    if trace.prompt_id != prompt.id:
        raise ValueError(f"trace for {trace.prompt_id!r} checked against prompt {prompt.id!r}")
    ans = parse_answer(trace.text)
    if ans is None:
        return False, True
    return ans == prompt.answer, False


def make_trace(s: int, r: int, prompt: PromptInstance, env: EnvConfig) -> TraceSample:
    return _make_trace_cached(int(s), int(r), prompt, env)


@lru_cache(maxsize=65536)
def _make_trace_cached(s: int, r: int, prompt: PromptInstance, env: EnvConfig) -> TraceSample:
    text = render_trace(s, r, prompt, env)
    ans = parse_answer(text)
    stub = TraceSample(prompt.id, s, r, text, count_tokens(text), ans, False)
    correct, malformed = verify(stub, prompt)
    return TraceSample(prompt.id, s, r, text, stub.token_count, ans, correct, malformed)


# ---------------------------------------------------------------------------
# sampling and likelihood
# ---------------------------------------------------------------------------


def _draw(probs: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    # inverse-CDF draw; numerically identical across platforms for a fixed stream
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(size), side="right")


def sample_latents(
    params: PolicyParams, bucket: int, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """``k`` independent draws of ``(s, r)``; ``s`` is 1-based."""
    s = _draw(params.depth_probs(bucket), k, rng) + 1
    r = _draw(params.redundancy_probs(bucket), k, rng)
    return s, r


def sample_trace(
    params: PolicyParams, prompt: PromptInstance, env: EnvConfig, rng: np.random.Generator
) -> TraceSample:
    check_params(params, env)
    s, r = sample_latents(params, bucket_of(prompt, env), 1, rng)
    return make_trace(s[0], r[0], prompt, env)


def sample_group(
    params: PolicyParams, prompt: PromptInstance, env: EnvConfig, k: int, rng: np.random.Generator
) -> RolloutGroup:
    """``k`` rollouts for one prompt, as a :class:`RolloutGroup`."""
    check_params(params, env)
    if k < 1:
        raise ValueError("k must be >= 1")
    bucket = bucket_of(prompt, env)
    s, r = sample_latents(params, bucket, k, rng)
    samples = [make_trace(si, ri, prompt, env) for si, ri in zip(s, r)]
    return RolloutGroup.from_samples(prompt.id, samples, bucket)


def trace_logprob(
    params: PolicyParams, trace: TraceSample, env: EnvConfig, bucket: int = 0
) -> float:
    s, r = trace.latent_depth, trace.latent_redundancy
    if not 1 <= s <= env.s_max or not 0 <= r <= env.r_max:
        raise RangeError(f"latents (s={s}, r={r}) outside the environment grid")
    lu = log_softmax(params.depth_logits[bucket])
    lv = log_softmax(params.redundancy_logits[bucket])
    return float(lu[s - 1] + lv[r])
