import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crtlab.core import PolicyParams, PromptInstance, TraceSample
from crtlab.env import (
    EnvConfig,
    bucket_of,
    check_params,
    count_tokens,
    make_trace,
    parse_answer,
    render_trace,
    sample_group,
    sample_latents,
    sample_trace,
    trace_logprob,
    verify,
)
from crtlab.exceptions import ConfigError, RangeError

ENV = EnvConfig()
P = PromptInstance("p1", 3, (3, 4, 5), 12)


def point_mass(n, idx, big=1e9):
    x = np.full(n, -big)
    x[idx] = big
    return x


def test_config_validation():
    with pytest.raises(ConfigError):
        EnvConfig(s_max=1)
    with pytest.raises(ConfigError):
        EnvConfig(r_max=0)
    with pytest.raises(ConfigError):
        EnvConfig(tokens_per_step=2)
    with pytest.raises(ConfigError):
        EnvConfig(conditioning="per_prompt")
    with pytest.raises(ConfigError):
        EnvConfig.from_dict({"s_max": 4, "depth": 3})
    assert EnvConfig.from_dict(ENV.to_dict()) == ENV


def test_minimal_trace():
    text = render_trace(1, 0, P, ENV)
    lines = text.splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("Step 1:") and lines[-1].endswith("Answer: 3")
    assert "double-check" not in text


def test_render_deterministic():
    assert render_trace(3, 2, P, ENV) == render_trace(3, 2, P, ENV)


def test_redundancy_token_delta():
    d = count_tokens(render_trace(3, 2, P, ENV)) - count_tokens(render_trace(3, 0, P, ENV))
    assert d == 2 * ENV.tokens_per_redundancy


@pytest.mark.parametrize("env", [ENV, EnvConfig(s_max=2, r_max=1, tokens_per_step=10,
                                                tokens_per_redundancy=5, closing_tokens=3),
                                 EnvConfig(tokens_per_step=6, tokens_per_redundancy=30, closing_tokens=9)])
def test_token_count_closed_form(env):
    q = PromptInstance("q", 2, (1, 2), 3)
    for s in range(1, env.s_max + 1):
        for r in range(env.r_max + 1):
            assert count_tokens(render_trace(s, r, q, env)) == env.token_count(s, r)
            assert make_trace(s, r, q, env).token_count == env.length_grid()[s - 1, r]


def test_verification_blocks_are_identical_and_restate_partial():
    lines = render_trace(2, 3, P, ENV).splitlines()
    blocks = [ln for ln in lines if ln.startswith("Let me double-check")]
    assert len(blocks) == 3 and len(set(blocks)) == 1
    assert " 7," in blocks[0] and blocks[0].endswith("consistent.")


def test_render_out_of_range():
    with pytest.raises(RangeError):
        render_trace(0, 0, P, ENV)
    with pytest.raises(RangeError):
        render_trace(1, ENV.r_max + 1, P, ENV)


@pytest.mark.parametrize("s", range(1, 7))
def test_correct_iff_deep_enough(s):
    t = make_trace(s, 1, P, ENV)
    assert t.correct == (s >= P.required_depth)
    assert t.extracted_answer == P.partial(s)
    assert not t.malformed


def test_verify_deleted_answer_is_malformed():
    t = make_trace(3, 0, P, ENV)
    stripped = dataclasses.replace(t, text="\n".join(t.text.splitlines()[:-1]))
    assert verify(stripped, P) == (False, True)


def test_verify_ignores_latents():
    t = make_trace(1, 0, P, ENV)
    liar = dataclasses.replace(t, latent_depth=6)
    assert verify(liar, P) == (False, False)


def test_verify_prompt_mismatch():
    with pytest.raises(ValueError):
        verify(make_trace(3, 0, P, ENV), PromptInstance("other", 1, (1,), 1))


@pytest.mark.parametrize("text,ans", [("Answer: 12", 12), ("x\nAnswer:  -4  \n\n", -4),
                                      ("Answer: 12\nmore", None), ("", None)])
def test_parse_answer(text, ans):
    assert parse_answer(text) == ans


def test_point_mass_depth_always_correct():
    params = PolicyParams(point_mass(6, P.required_depth - 1), np.zeros(5))
    g = sample_group(params, P, ENV, 50, np.random.default_rng(0))
    assert g.correct.all()


def test_point_mass_zero_redundancy():
    params = PolicyParams(np.zeros(6), point_mass(5, 0))
    g = sample_group(params, P, ENV, 50, np.random.default_rng(0))
    assert all("double-check" not in s.text for s in g.samples)


def test_uniform_accuracy_matches_tail_probability():
    env = EnvConfig(s_max=4, r_max=2)
    n = 100_000
    s, _ = sample_latents(env.initial_params(), 0, n, np.random.default_rng(1))
    acc = np.mean(s >= 3)
    assert abs(acc - 0.5) < 3 * math.sqrt(0.25 / n)


def test_sampling_is_seeded():
    a = sample_group(ENV.initial_params(), P, ENV, 16, np.random.default_rng(3))
    b = sample_group(ENV.initial_params(), P, ENV, 16, np.random.default_rng(3))
    assert a == b
    assert sample_trace(ENV.initial_params(), P, ENV, np.random.default_rng(3)) == a.samples[0]


def test_dimension_mismatch():
    with pytest.raises(ConfigError):
        sample_group(PolicyParams(np.zeros(5), np.zeros(5)), P, ENV, 4, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        check_params(PolicyParams(np.zeros(6), np.zeros(5)), EnvConfig(conditioning="bucketed"))


def test_logprob_uniform():
    env = EnvConfig(s_max=4, r_max=2)
    t = make_trace(2, 1, P, env)
    assert trace_logprob(env.initial_params(), t, env) == pytest.approx(math.log(1 / 4) + math.log(1 / 3))
    assert trace_logprob(env.initial_params(), t, env) == pytest.approx(-2.4849, abs=1e-4)


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.floats(-20, 20))
@settings(max_examples=40, deadline=None)
def test_logprob_normalized_and_shift_invariant(u, v, c):
    env = EnvConfig(s_max=4, r_max=2)
    params = PolicyParams(u, v)
    shifted = PolicyParams(np.array(u) + c, v)
    total = 0.0
    for s in range(1, 5):
        for r in range(3):
            t = make_trace(s, r, P, env)
            lp = trace_logprob(params, t, env)
            assert lp == pytest.approx(trace_logprob(shifted, t, env), abs=1e-9)
            total += math.exp(lp)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_logprob_out_of_grid():
    t = TraceSample("p1", 9, 0, "Answer: 1", 2, 1, False)
    with pytest.raises(RangeError):
        trace_logprob(ENV.initial_params(), t, ENV)


def test_buckets_global_and_noiseless():
    assert bucket_of(P, ENV) == 0
    env = EnvConfig(conditioning="bucketed")
    assert env.n_buckets == env.s_max
    assert bucket_of(P, env) == P.required_depth - 1


def test_noisy_buckets_stable_per_prompt():
    env = EnvConfig(conditioning="bucketed", noise_prob=1.0)
    prompts = [PromptInstance(f"q{i}", 2, (1, 1), 2) for i in range(200)]
    buckets = [bucket_of(p, env) for p in prompts]
    assert buckets == [bucket_of(p, env) for p in prompts]
    assert set(buckets) == set(range(env.s_max))


def test_bucketed_sampling_uses_row():
    env = EnvConfig(conditioning="bucketed")
    u = np.zeros((6, 6))
    u[P.required_depth - 1] = point_mass(6, 5)
    params = PolicyParams(u, np.zeros((6, 5)))
    g = sample_group(params, P, env, 20, np.random.default_rng(0))
    assert g.bucket == P.required_depth - 1
    assert (g.depths == 6).all()
