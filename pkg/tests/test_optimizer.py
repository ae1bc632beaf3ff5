import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reno import autodiff as ad
from reno.criteria import (CriterionSpec, RewardTerm, chi_norm_logpdf, color_term, default_criterion,
                           full_objective)
from reno.generators import GeneratorSpec, NoiseVector, embed_prompt, generate, make_generator
from reno.optimizer import (NumericAbort, OptimizerConfig, grad_norm_clip, init_state, reno_run,
                            reno_step, sample_standard_normal)


def pixel_sum_term(n_pixels):
    return RewardTerm("pixel_sum", 1.0, (0.0, 3.0 * n_pixels), lambda x, p: ad.total(x))


# -- sampling -----------------------------------------------------------------


def test_sampling_is_deterministic():
    a, b = sample_standard_normal(33, 5), sample_standard_normal(33, 5)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.seed == 5 and a.dim == 33
    assert sample_standard_normal(33, 6).values.tobytes() != a.values.tobytes()


def test_sampling_moments():
    z = sample_standard_normal(10_000, 0).values
    # standard errors: mean 0.01, variance ~0.014
    assert abs(z.mean()) < 0.04
    assert abs(z.var() - 1.0) < 0.06
    assert abs(np.mean(z ** 3)) < 0.1


def test_sampling_norm_concentrates():
    d = 4096
    for seed in range(100):
        r = sample_standard_normal(d, seed).norm / math.sqrt(d)
        assert 0.95 < r < 1.05


def test_box_muller_by_hand():
    rng = np.random.Generator(np.random.PCG64(11))
    u1 = 1.0 - rng.random(2)
    u2 = rng.random(2)
    want = [math.sqrt(-2 * math.log(u1[0])) * math.cos(2 * math.pi * u2[0]),
            math.sqrt(-2 * math.log(u1[0])) * math.sin(2 * math.pi * u2[0]),
            math.sqrt(-2 * math.log(u1[1])) * math.cos(2 * math.pi * u2[1])]
    np.testing.assert_allclose(sample_standard_normal(3, 11).values, want, rtol=1e-15)


# -- clipping -----------------------------------------------------------------------


def test_clip_under_threshold_is_unchanged():
    g = np.array([0.03, 0.04])
    assert grad_norm_clip(g, 0.1) is g or np.array_equal(grad_norm_clip(g, 0.1), g)


def test_clip_rescales():
    np.testing.assert_array_equal(grad_norm_clip([1.0, 0, 0, 0], 0.1), [0.1, 0, 0, 0])


def test_clip_zero_vector():
    np.testing.assert_array_equal(grad_norm_clip(np.zeros(3), 0.1), np.zeros(3))


def test_clip_rejects_non_finite():
    with pytest.raises(ad.NonFiniteError):
        grad_norm_clip([np.nan, 1.0], 0.1)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(1e-3, 10))
@settings(max_examples=200, deadline=None)
def test_clip_bound_property(g, c):
    out = grad_norm_clip(g, c)
    assert np.linalg.norm(out) <= c * (1 + 1e-12)


# -- the update rule ------------------------------------------------------------------


@pytest.fixture(scope="module")
def rank_one():
    """Linear generator whose every pixel is u . eps, so d(pixel sum)/d eps is parallel to u."""
    u = np.array([0.6, 0.8])
    shape = (2, 2, 3)
    n = 12
    g = GeneratorSpec("linear", 2, shape, {"W": np.tile(u, (n, 1)), "B": np.zeros((n, 16)), "b": np.zeros(n)})
    crit = CriterionSpec((pixel_sum_term(4),), lambda_reg=0.0)
    return g, crit, u


def test_three_step_heavy_ball_trace(rank_one, prompt):
    g, crit, u = rank_one
    cfg = OptimizerConfig(steps=3, learning_rate=5.0, momentum=0.9, clip_norm=0.1, lambda_reg=0.0)
    state = init_state(2, 0)
    eps0 = state.eps.values
    vs = []
    for _ in range(3):
        state, row = reno_step(state, cfg, g, prompt, crit)
        assert row.grad_pre > 0.1
        assert row.grad_post == pytest.approx(0.1, abs=1e-15)
        vs.append(state.velocity)
    for v, coef in zip(vs, [0.5, 0.95, 1.355]):
        np.testing.assert_allclose(v, coef * u, rtol=0, atol=1e-12)
    np.testing.assert_allclose(state.eps.values - eps0, (0.5 + 0.95 + 1.355) * u, rtol=0, atol=1e-12)


def test_plain_ascent_when_momentum_and_clip_are_off(small_mlp, prompt):
    crit = CriterionSpec(default_criterion(0).terms, lambda_reg=0.0)
    cfg = OptimizerConfig(steps=3, learning_rate=0.05, momentum=0.0, clip_norm=math.inf, lambda_reg=0.0)
    state = init_state(16, 2)
    for _ in range(3):
        eps = state.eps.values
        h = 1e-6
        fd = np.array([(full_objective(crit, small_mlp, eps + h * e, prompt)[1].item()
                        - full_objective(crit, small_mlp, eps - h * e, prompt)[1].item()) / (2 * h)
                       for e in np.eye(16)])
        state, _ = reno_step(state, cfg, small_mlp, prompt, crit)
        np.testing.assert_allclose(state.eps.values, eps + 0.05 * fd, rtol=0, atol=1e-8)


def test_step_does_not_modify_its_input(small_mlp, prompt):
    state = init_state(16, 0)
    before = (state.eps.values.tobytes(), state.velocity.tobytes(), state.t)
    reno_step(state, OptimizerConfig(), small_mlp, prompt, default_criterion(0))
    assert (state.eps.values.tobytes(), state.velocity.tobytes(), state.t) == before


def test_clip_applies_to_regularizer_too(prompt):
    # only K contributes; its gradient at a tiny eps is huge and must still be clipped
    g = make_generator("linear", 8, (2, 2, 3))
    crit = CriterionSpec((RewardTerm("flat", 0.0, (0, 1), lambda x, p: ad.scale(ad.mean(x), 0.0)),), 1.0)
    state = init_state(8, 0)
    state = replace(state, eps=NoiseVector(state.eps.values * 1e-3, 0))
    _, row = reno_step(state, OptimizerConfig(lambda_reg=1.0), g, prompt, crit)
    assert row.grad_pre > 100 and row.grad_post == pytest.approx(0.1, abs=1e-12)


# -- selection --------------------------------------------------------------------


def test_zero_steps_returns_initial_image(small_mlp, prompt):
    cfg = OptimizerConfig(steps=0, seed=4)
    img, rec = reno_run(small_mlp, prompt, default_criterion(0), cfg)
    assert len(rec.rows) == 1 and rec.best.t == 0
    want = generate(small_mlp, sample_standard_normal(16, 4), prompt).data
    assert img.tobytes() == want.tobytes()


def test_tie_keeps_earliest(prompt):
    g = make_generator("linear", 4, (2, 2, 3))
    const = CriterionSpec((RewardTerm("c", 1.0, (0, 2), lambda x, p: ad.add(ad.scale(ad.mean(x), 0.0), 1.0)),))
    _, rec = reno_run(g, prompt, const, OptimizerConfig(steps=5))
    assert rec.best.t == 0
    assert [r.is_new_best for r in rec.rows] == [True] + [False] * 5


def test_evaluation_count_is_steps_plus_one(small_mlp, prompt):
    _, rec = reno_run(small_mlp, prompt, default_criterion(0), OptimizerConfig(steps=7))
    assert [r.t for r in rec.rows] == list(range(8))


def test_best_invariants(small_mlp, prompt):
    for seed in range(5):
        img, rec = reno_run(small_mlp, prompt, default_criterion(0), OptimizerConfig(steps=20, seed=seed))
        rewards = rec.rewards
        assert rec.best.reward == rewards.max()
        assert rec.best.t == int(np.argmax(rewards))
        new_best = [r.reward for r in rec.rows if r.is_new_best]
        assert all(b > a for a, b in zip(new_best, new_best[1:]))
        assert generate(small_mlp, rec.best.eps, prompt).data.tobytes() == img.tobytes()


def test_velocity_and_clip_bounds(small_mlp, prompt):
    cfg = OptimizerConfig(steps=30)
    _, rec = reno_run(small_mlp, prompt, default_criterion(0), cfg)
    for r in rec.rows:
        assert r.grad_post <= cfg.clip_norm + 1e-12
        bound = cfg.learning_rate * cfg.clip_norm * sum(cfg.momentum ** k for k in range(r.t + 1))
        assert r.velocity_norm <= bound + 1e-12


def test_runs_are_deterministic_and_weights_frozen(small_mlp, prompt):
    from reno.generators import serialize_generator

    before = serialize_generator(small_mlp)
    a = reno_run(small_mlp, prompt, default_criterion(0), OptimizerConfig(steps=10, seed=3))[1]
    b = reno_run(small_mlp, prompt, default_criterion(0), OptimizerConfig(steps=10, seed=3))[1]
    assert [(r.reward, r.per_term, r.k, r.grad_pre, r.eps_norm) for r in a.rows] == \
           [(r.reward, r.per_term, r.k, r.grad_pre, r.eps_norm) for r in b.rows]
    assert serialize_generator(small_mlp) == before


def test_trajectory_row_fields(small_mlp, prompt):
    _, rec = reno_run(small_mlp, prompt, default_criterion(0), OptimizerConfig(steps=2, seed=1))
    eps0 = sample_standard_normal(16, 1).values
    first = rec.rows[0]
    assert first.k == chi_norm_logpdf(eps0).item()
    assert first.eps_norm == float(np.linalg.norm(eps0))
    assert first.objective == pytest.approx(first.reward + 0.01 * first.k, rel=1e-14)


def test_eps0_dimension_checked(small_mlp, prompt):
    with pytest.raises(ValueError):
        reno_run(small_mlp, prompt, default_criterion(0), eps0=sample_standard_normal(8, 0))


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(momentum=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(learning_rate=0)
    with pytest.raises(ValueError):
        OptimizerConfig(select_on="J")
    assert OptimizerConfig.large_image().learning_rate == 10.0
    c = OptimizerConfig()
    assert (c.steps, c.learning_rate, c.momentum, c.clip_norm, c.lambda_reg) == (50, 5.0, 0.9, 0.1, 0.01)


# -- end-to-end behaviour -------------------------------------------------------------


def test_regularizer_only_run_reaches_chi_mode(prompt):
    g = make_generator("linear", 64, (2, 2, 3))
    crit = default_criterion(0).with_weights({n: 0.0 for n in default_criterion(0).names})
    cfg = OptimizerConfig(steps=200, select_on="objective", lambda_reg=0.01)
    _, rec = reno_run(g, prompt, crit, cfg)
    assert rec.final_eps.norm == pytest.approx(math.sqrt(63), rel=0.02)


def test_color_run_improves_by_step_ten(prompt):
    g = make_generator("colorfield", 64, (16, 16, 3), weight_seed=0)
    crit = CriterionSpec((color_term("R", (16, 16, 3)),))
    for seed in range(20):
        _, rec = reno_run(g, prompt, crit, OptimizerConfig(steps=10, seed=seed))
        assert rec.rows[10].reward > rec.rows[0].reward


def test_nesterov_flag_runs_and_differs(small_mlp, prompt):
    a = reno_run(small_mlp, prompt, default_criterion(0), OptimizerConfig(steps=10))[1]
    b = reno_run(small_mlp, prompt, default_criterion(0), OptimizerConfig(steps=10, nesterov=True))[1]
    assert a.rows[0].reward == b.rows[0].reward
    assert a.final_eps.values.tobytes() != b.final_eps.values.tobytes()
    assert b.best.reward >= b.rows[0].reward


def test_non_finite_objective_aborts(prompt):
    g = make_generator("linear", 4, (2, 2, 3))

    def exploding(x, p):
        return ad.exp(ad.scale(ad.mean(x), 1e4))

    crit = CriterionSpec((RewardTerm("boom", 1.0, (0, 1), exploding),))
    with pytest.raises(NumericAbort) as info:
        reno_run(g, prompt, crit, OptimizerConfig(steps=3))
    assert info.value.t == 0
    assert "t=0" in str(info.value)


def test_abort_reports_per_term_values(prompt):
    g = make_generator("linear", 4, (2, 2, 3))
    calls = {"n": 0}

    def flaky(x, p):
        calls["n"] += 1
        return ad.scale(ad.mean(x), 1.0 if calls["n"] < 3 else math.inf)

    ok = RewardTerm("ok", 1.0, (0, 1), lambda x, p: ad.mean(x))
    with pytest.raises(NumericAbort) as info:
        reno_run(g, prompt, CriterionSpec((ok, RewardTerm("flaky", 1.0, (0, 1), flaky))),
                 OptimizerConfig(steps=5))
    assert info.value.t >= 1
