"""Acceptance gate. Each criterion is one test; the terminal summary prints a
PASS/FAIL line per criterion (see conftest.py).

Tolerances are fixed here and must not be loosened to turn a result green.
"""

import itertools
import json
import shutil
import time
from fractions import Fraction

import numpy as np
import pytest

import oracles
from crtlab import (
    EnvConfig,
    HyperParams,
    NormStatsSource,
    PolicyParams,
    TrainingRun,
    make_prompt_set,
)
from crtlab.env import render_trace, sample_group
from crtlab.gradients import (
    ACCURACY,
    NORMALIZED_LENGTH,
    estimate_gradient_with_se,
    exact_gradient,
    exact_objective,
    expected_accuracy,
    expected_length,
    finite_difference_gradient,
)
from crtlab.harness import runner
from crtlab.harness.checkpoint import list_checkpoints
from crtlab.harness.config import RunConfig
from crtlab.metrics import AES1, AES2, EvalReport, aes, compression_ratio, redundancy_report, stability_table
from crtlab.normalization import freeze_stats
from crtlab.trainer import EVAL_STREAM, Branch, derive_rng, switching_decision

# ---------------------------------------------------------------------------
# shared demo environment (criteria 3, 4 and 6)
# ---------------------------------------------------------------------------

DEMO_ENV = EnvConfig(s_max=6, r_max=4)
DEMO_DEPTHS = [2, 3, 4, 5] * 5
DEMO_INIT = PolicyParams(np.array([[0, 0, 0, 0, 0, 4.0]]), np.zeros((1, 5)))
# lr_theta raised from the 0.05 default so 2,000 steps reach convergence
DEMO_HP = HyperParams(lr_theta=0.5, total_steps=2000, stage1_budget=1000)
DEMO_SEED = 1


def demo_prompts():
    return make_prompt_set(DEMO_DEPTHS, np.random.default_rng(7))


@pytest.fixture(scope="module")
def demo_run():
    prompts = demo_prompts()
    t0 = time.perf_counter()
    run = TrainingRun.start(prompts, DEMO_ENV, DEMO_HP, "crt_two_stage", DEMO_SEED, init_params=DEMO_INIT)
    run.run()
    return run, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# 1. AES reproduction
# ---------------------------------------------------------------------------

# (method, base Avg acc/len, model Avg acc/len, printed AES1, printed AES2)
IN_DOMAIN = (84.81, 3428.0)
OUT_DOMAIN = (50.84, 9894.5)
QWEN = (65.77, 2472.8)
PUBLISHED = [
    ("in/ThinkPrune-500", IN_DOMAIN, (82.08, 2725.0), 0.0441, -0.1168),
    ("in/ThinkPrune-1k", IN_DOMAIN, (83.62, 2667.0), 0.1515, 0.0811),
    ("in/L1", IN_DOMAIN, (86.02, 3581.5), -0.0022, -0.0022),
    ("in/O1-Pruner-1.0", IN_DOMAIN, (83.06, 2723.0), 0.1022, -0.0013),
    ("in/O1-Pruner-4.0", IN_DOMAIN, (84.97, 3006.5), 0.1288, 0.1288),
    ("in/ShorterBetter", IN_DOMAIN, (76.85, 1749.6), 0.0207, -0.4482),
    ("in/ACPO", IN_DOMAIN, (84.11, 2713.3), 0.1673, 0.1261),
    ("in/CRT", IN_DOMAIN, (85.35, 2499.2), 0.2901, 0.2901),
    ("out/ThinkPrune-500", OUT_DOMAIN, (48.72, 9123.2), -0.13, -0.33),
    ("out/ThinkPrune-1k", OUT_DOMAIN, (49.46, 8908.5), -0.03, -0.17),
    ("out/L1", OUT_DOMAIN, (52.98, 9902.2), 0.12, 0.12),
    ("out/O1-Pruner-1.0", OUT_DOMAIN, (49.76, 9042.8), -0.01, -0.12),
    ("out/O1-Pruner-4.0", OUT_DOMAIN, (51.58, 9141.0), 0.12, 0.12),
    ("out/ShorterBetter", OUT_DOMAIN, (49.58, 7722.4), 0.10, -0.03),
    ("out/ACPO", OUT_DOMAIN, (51.33, 8772.2), 0.14, 0.14),
    ("out/CRT", OUT_DOMAIN, (52.43, 8786.4), 0.21, 0.21),
    ("qwen/ThinkPrune-500", QWEN, (64.96, 2109.8), 0.09, 0.02),
    ("qwen/ThinkPrune-1k", QWEN, (64.46, 2006.9), 0.09, -0.01),
    ("qwen/O1-Pruner-4.0", QWEN, (62.66, 1394.3), 0.2, -0.04),
    ("qwen/ShorterBetter", QWEN, (61.22, 1343.4), 0.11, -0.23),
    ("qwen/ACPO", QWEN, (63.12, 1675.6), 0.12, -0.08),
    ("qwen/CRT", QWEN, (62.99, 1361.4), 0.24, 0.03),
]
AES_TOL = 0.005


@pytest.mark.acceptance("AC1 AES reproduction of published tables (+-0.005)")
def test_ac1_aes_reproduction(record_property):
    t0 = time.perf_counter()
    misses = []
    for name, (ab, lb), (am, lm), p1, p2 in PUBLISHED:
        for label, w, printed in (("aes1", AES1, p1), ("aes2", AES2, p2)):
            got = aes(ab, lb, am, lm, w)
            # the library agrees with the hand-written formula to machine precision
            assert got == pytest.approx(oracles.aes(ab, lb, am, lm, w.alpha, w.beta, w.gamma), abs=1e-12)
            if abs(got - printed) > AES_TOL:
                misses.append(f"{name} {label} {got:.4f} vs {printed}")
    # base against itself is identically zero
    for base in (IN_DOMAIN, OUT_DOMAIN, QWEN):
        assert aes(*base, *base, AES1) == 0.0 and aes(*base, *base, AES2) == 0.0
    elapsed = time.perf_counter() - t0
    n = 2 * len(PUBLISHED)
    record_property("detail", f"{n - len(misses)}/{n} entries within tolerance; off: {'; '.join(misses) or 'none'}")
    assert elapsed < 1.0
    assert not misses, "published entries not reproduced: " + "; ".join(misses)


# ---------------------------------------------------------------------------
# 2. gradient correctness
# ---------------------------------------------------------------------------

GRAD_ENV = EnvConfig(s_max=5, r_max=3)
FD_REL_TOL = 1e-5
N_FD_DRAWS = 100
N_MC_DRAWS = 10
MC_SAMPLES = 200_000
MC_GROUP = 16
MC_SIGMAS = 4.0


def _rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.mark.acceptance("AC2 gradient correctness (FD rel err <= 1e-5; MC within 4 SE)")
def test_ac2_gradient_correctness(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    prompts = make_prompt_set([2, 3, 4, 5], 3)
    # frozen stats taken from a uniform policy's rollouts
    uniform = GRAD_ENV.initial_params()
    groups = [sample_group(uniform, p, GRAD_ENV, 64, rng) for p in prompts]
    frozen = NormStatsSource.frozen(freeze_stats(uniform, groups))

    worst_fd = 0.0
    worst_oracle = 0.0
    for draw in range(N_FD_DRAWS):
        params = PolicyParams(rng.normal(0, 1.5, (1, 5)), rng.normal(0, 1.5, (1, 4)))
        prompt = prompts[draw % len(prompts)]
        mean, std = frozen.lookup(prompt.id)
        for obj in (ACCURACY, NORMALIZED_LENGTH):
            g = exact_gradient(params, prompt, obj, GRAD_ENV, frozen)
            fd = finite_difference_gradient(lambda q: exact_objective(q, prompt, obj, GRAD_ENV, frozen), params, 1e-5)
            worst_fd = max(worst_fd, _rel_err(g, fd))
            if obj is ACCURACY:
                f = lambda s, r: float(s >= prompt.required_depth)  # noqa: E731
            else:
                f = lambda s, r: oracles.sigma((oracles.tokens(s, r) - mean) / std)  # noqa: E731
            ref = oracles.enumerate_gradient(params.depth_logits[0], params.redundancy_logits[0], f)
            worst_oracle = max(worst_oracle, _rel_err(g, ref))

    worst_z = 0.0
    for draw in range(N_MC_DRAWS):
        params = PolicyParams(rng.normal(0, 1.0, (1, 5)), rng.normal(0, 1.0, (1, 4)))
        prompt = prompts[draw % len(prompts)]
        batch = [sample_group(params, prompt, GRAD_ENV, MC_GROUP, rng) for _ in range(MC_SAMPLES // MC_GROUP)]
        for obj in (ACCURACY, NORMALIZED_LENGTH):
            est, se = estimate_gradient_with_se(params, batch, obj, frozen)
            exact = exact_gradient(params, prompt, obj, GRAD_ENV, frozen)
            worst_z = max(worst_z, float(np.max(np.abs(est - exact) / se)))
    elapsed = time.perf_counter() - t0
    record_property(
        "detail",
        f"max FD rel err {worst_fd:.2e}; max oracle rel err {worst_oracle:.2e}; "
        f"max |z| {worst_z:.2f} over {N_MC_DRAWS}x2 estimates; {elapsed:.1f}s",
    )
    assert worst_fd <= FD_REL_TOL
    assert worst_oracle <= 1e-10
    assert worst_z <= MC_SIGMAS
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 3. CRT end to end
# ---------------------------------------------------------------------------


@pytest.mark.acceptance("AC3 CRT end-to-end (length -30%, accuracy >= ref - eps - 0.02)")
def test_ac3_crt_end_to_end(demo_run, record_property):
    run, elapsed = demo_run
    prompts = run.prompts
    ref = run.context.reference.params
    len_ref, acc_ref = expected_length(ref, prompts, DEMO_ENV), expected_accuracy(ref, prompts, DEMO_ENV)
    len_fin = expected_length(run.state.params, prompts, DEMO_ENV)
    acc_fin = expected_accuracy(run.state.params, prompts, DEMO_ENV)
    reduction = 1 - len_fin / len_ref
    record_property(
        "detail",
        f"length {len_ref:.2f}->{len_fin:.2f} ({reduction:.1%} shorter); "
        f"accuracy {acc_ref:.4f}->{acc_fin:.4f}; {run.state.step} steps in {elapsed:.1f}s",
    )
    assert run.state.step <= 2000
    assert reduction >= 0.30
    assert acc_fin >= acc_ref - DEMO_HP.epsilon - 0.02
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# 4. Stage II guard
# ---------------------------------------------------------------------------


@pytest.mark.acceptance("AC4 Stage II guard (50-step mean lnorm bound; accuracy kept)")
def test_ac4_stage2_guard(demo_run, record_property):
    run, _ = demo_run
    guard = run.context.guard
    assert guard is not None
    switch = run.context.stage1_end_step
    lnorm = np.array([r["mean_lnorm"] for r in run.history if r["step"] >= switch])
    assert all(r["stage"] == "stage_ii" for r in run.history if r["step"] >= switch)
    running = np.convolve(lnorm, np.ones(50) / 50, mode="valid")
    bound = guard.len_reference + guard.delta + guard.eta_len + 0.05
    acc_s1 = expected_accuracy(run.context.stage1_snapshot.params, run.prompts, DEMO_ENV)
    acc_fin = expected_accuracy(run.state.params, run.prompts, DEMO_ENV)
    record_property(
        "detail",
        f"max running mean {running.max():.4f} vs bound {bound:.4f}; "
        f"accuracy stage-I-end {acc_s1:.4f} -> final {acc_fin:.4f}",
    )
    assert running.max() <= bound
    assert acc_fin >= acc_s1 - 0.01


# ---------------------------------------------------------------------------
# 5. primal-dual baseline
# ---------------------------------------------------------------------------


@pytest.mark.acceptance("AC5 primal-dual (lambda >= 0; slack => lambda = 0 on >= 95%; length -20%)")
def test_ac5_primal_dual(record_property):
    prompts = demo_prompts()
    # reference never reaches the required depth, so its accuracy floor is
    # slack for any policy from the first step
    u = np.full(6, -20.0)
    u[0] = 20.0
    slack_ref = PolicyParams(u[None], np.zeros((1, 5)))
    hp = HyperParams(lr_theta=0.5, total_steps=2000)
    run = TrainingRun.start(prompts, DEMO_ENV, hp, "primal_dual", DEMO_SEED,
                            init_params=DEMO_INIT, reference_params=slack_ref)
    lams = np.array([rec["lambda"] for rec in run.iterate()] + [run.state.dual_lambda])
    len0 = expected_length(DEMO_INIT, prompts, DEMO_ENV)
    reduction = 1 - expected_length(run.state.params, prompts, DEMO_ENV) / len0
    zero_frac = float(np.mean(lams == 0.0))
    record_property(
        "detail", f"min lambda {lams.min():.3g}; lambda == 0 on {zero_frac:.1%} of steps; length -{reduction:.1%}"
    )
    assert run.state.step == 2000
    assert lams.min() >= 0.0
    assert zero_frac >= 0.95
    assert reduction >= 0.20


# ---------------------------------------------------------------------------
# 6. redundancy ordering
# ---------------------------------------------------------------------------


@pytest.mark.acceptance("AC6 redundancy ordering (extra block lowers R_zip; stage-I-end R_zip > initial)")
def test_ac6_redundancy_ordering(demo_run, record_property):
    rng = np.random.default_rng(6)
    env = EnvConfig(s_max=8, r_max=9)
    prompts = make_prompt_set(rng.integers(1, 9, 200).tolist(), 11)
    checked = violations = 0
    first_block = 0
    while checked < 1000:
        p = prompts[int(rng.integers(len(prompts)))]
        s = int(rng.integers(1, env.s_max + 1))
        r = int(rng.integers(0, env.r_max))
        text = render_trace(s, r, p, env)
        if len(text.encode()) < 200:
            continue
        checked += 1
        if not compression_ratio(render_trace(s, r + 1, p, env)) < compression_ratio(text):
            violations += 1
            first_block += r == 0

    run, _ = demo_run
    erng = derive_rng(DEMO_SEED, EVAL_STREAM, 0)
    init_samples = [t for p in run.prompts for t in sample_group(DEMO_INIT, p, DEMO_ENV, 16, erng).samples]
    erng = derive_rng(DEMO_SEED, EVAL_STREAM, 0)
    s1 = run.context.stage1_snapshot.params
    s1_samples = [t for p in run.prompts for t in sample_group(s1, p, DEMO_ENV, 16, erng).samples]
    r_init = redundancy_report(init_samples).r_all
    r_s1 = redundancy_report(s1_samples).r_all
    record_property(
        "detail",
        f"{violations}/{checked} traces violate ({first_block} of them add the first block); r_all initial {r_init:.4f} -> stage-I-end {r_s1:.4f}"
    )
    assert violations == 0
    assert r_s1 > r_init


# ---------------------------------------------------------------------------
# 7. switching rule exactness
# ---------------------------------------------------------------------------


@pytest.mark.acceptance("AC7 switching rule exact on 10^4 grid incl. ties")
def test_ac7_switching_exactness(record_property):
    # dyadic grid: every value and difference is exact in binary floating
    # point, so the rational oracle and the float rule must agree and ties
    # are genuine ties
    accs = [Fraction(k, 16) for k in range(7, 17)]
    slack = [Fraction(k, 64) for k in range(10)]
    mismatches = ties = 0
    for a, ref, eps, eta in itertools.product(accs, accs, slack, slack):
        expected = Branch.RECTIFY_ACCURACY if a < ref - eps - eta else Branch.SHORTEN_LENGTH
        ties += a == ref - eps - eta
        got = switching_decision(float(a), float(ref), float(eps), float(eta)).branch
        mismatches += got is not expected
    n = len(accs) ** 2 * len(slack) ** 2
    record_property("detail", f"{n} tuples, {ties} ties, {mismatches} mismatches")
    assert n == 10_000
    assert ties > 0
    assert mismatches == 0


# ---------------------------------------------------------------------------
# 8. determinism and resume
# ---------------------------------------------------------------------------


def _small_config(tmp_path, mode="crt_two_stage"):
    d = {
        "env": {"s_max": 6, "r_max": 4},
        "prompts": {"generate": {"depths": [2, 3, 4, 5] * 3, "seed": 5}},
        "hyper": {"lr_theta": 0.5, "total_steps": 60, "stage1_budget": 25, "batch_size": 8, "ref_rollouts": 16},
        "mode": mode,
        "seed": 11,
        "checkpoint_every": 10,
        "init": {"depth_logits": [0, 0, 0, 0, 0, 4.0]},
    }
    path = tmp_path / f"{mode}.json"
    path.write_text(json.dumps(d))
    return RunConfig.from_dict(d, base_dir=tmp_path)


@pytest.mark.acceptance("AC8 determinism and resume (byte-identical logs)")
def test_ac8_determinism_and_resume(tmp_path, record_property):
    resumed = 0
    for mode in ("crt_two_stage", "primal_dual", "crt_stage1_only"):
        cfg = _small_config(tmp_path, mode)
        a = runner.train(cfg, tmp_path / f"{mode}_a")
        b = runner.train(cfg, tmp_path / f"{mode}_b")
        full = (a / "log.jsonl").read_bytes()
        assert full == (b / "log.jsonl").read_bytes()
        assert len(full.splitlines()) == 60
        for ckpt in list_checkpoints(a):
            # resume from every checkpoint in a copy of the run directory
            # whose log also carries records past the checkpoint
            c = tmp_path / f"{mode}_resume_{ckpt.stem}"
            shutil.copytree(a, c)
            runner.train(cfg, c, resume=c / "checkpoints" / ckpt.name)
            assert (c / "log.jsonl").read_bytes() == full, f"{mode} resume from {ckpt.name}"
            resumed += 1
        # interrupted run (stopped early) then resumed from its last checkpoint
        d = tmp_path / f"{mode}_interrupted"
        runner.train(cfg, d, max_steps=37)
        last = list_checkpoints(d)[-1]
        runner.train(cfg, d, resume=last)
        assert (d / "log.jsonl").read_bytes() == full
    record_property("detail", f"3 modes byte-identical; {resumed} checkpoint resumes reproduce the log")


# ---------------------------------------------------------------------------
# 9. stability accounting
# ---------------------------------------------------------------------------


def _report(per):
    return EvalReport(
        acc=100 * float(np.mean([a for a, _ in per.values()])),
        mean_len=float(np.mean([l for _, l in per.values()])),
        per_prompt=per,
        rollouts=16,
    )


@pytest.mark.acceptance("AC9 stability accounting (sums to 100 +- 0.1; hand example exact)")
def test_ac9_stability_accounting(record_property):
    before = _report({"p1": (0.5, 100.0), "p2": (0.5, 100.0), "p3": (0.5, 100.0)})
    after = _report({"p1": (0.5, 80.0), "p2": (0.25, 90.0), "p3": (0.75, 120.0)})
    row = stability_table(before, after)
    assert (row.ad_pct, row.ap_pct, row.ai_pct, row.n_len_down) == (50.0, 50.0, 0.0, 2)

    rng = np.random.default_rng(9)
    worst = 0.0
    nonempty = 0
    for _ in range(2000):
        n = int(rng.integers(1, 40))
        ids = [f"q{i}" for i in range(n)]
        b = {i: (int(rng.integers(0, 17)) / 16, float(rng.integers(50, 500))) for i in ids}
        a = {i: (int(rng.integers(0, 17)) / 16, float(rng.integers(50, 500))) for i in ids}
        r = stability_table(_report(b), _report(a))
        if r.n_len_down > 0:
            nonempty += 1
            worst = max(worst, abs(r.ad_pct + r.ap_pct + r.ai_pct - 100.0))
        else:
            assert r.ad_pct is None and r.ap_pct is None and r.ai_pct is None
    record_property("detail", f"hand example exact; {nonempty} non-empty pairs, max |sum-100| {worst:.2e}")
    assert worst <= 0.1
