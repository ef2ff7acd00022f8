import numpy as np
import pytest

from conftest import randomize, tiny_config
from ditlab import DiT, make_feedback
from ditlab.schedule import (
    InferencePlan,
    baseline_block_cost,
    cached_block_cost,
    ddim_step,
    ilf_block_cost,
    make_plain_plan,
    make_plan,
    make_schedule,
    noise_sample,
    refresh_count,
    sample,
    spacing,
    t_post_annealed,
    t_post_rescaled,
    t_post_uniform,
)


# ---------------------------------------------------------------------------
# schedule construction and forward noising
# ---------------------------------------------------------------------------


def test_single_step_schedule():
    ns = make_schedule(1, 0.1, 0.1)
    assert np.isclose(ns.alpha_bar[1], 0.9)
    assert ns.alpha_bar[0] == 1.0


def test_alpha_bar_monotone_default():
    ns = make_schedule(1000)
    assert ns.alpha_bar[1000] < ns.alpha_bar[1]
    assert (np.diff(ns.alpha_bar) < 0).all()
    assert ((ns.beta[1:] > 0) & (ns.beta[1:] < 1)).all()
    assert (np.diff(ns.beta[1:]) >= 0).all()


def test_alpha_bar_matches_cumprod_oracle():
    ns = make_schedule(5, 0.1, 0.3)
    direct = 1.0
    for t in range(1, 6):
        direct *= 1.0 - ns.beta[t]
        assert np.isclose(ns.alpha_bar[t], direct)
    assert np.isclose(ns.alpha_bar[2], (1 - ns.beta[1]) * (1 - ns.beta[2]))


def test_make_schedule_rejects_bad_ranges():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(10, 0.2, 0.1)
    with pytest.raises(ValueError):
        make_schedule(10, 0.0, 0.1)


def test_noise_sample_endpoints():
    ns = make_schedule(1000)
    x0 = np.full((2, 2), 0.5, np.float32)
    eps = np.full((2, 2), -1.0, np.float32)
    assert np.array_equal(noise_sample(x0, 0, eps, ns), x0)  # alpha_bar(0) = 1
    nearly_noise = noise_sample(x0, 1000, eps, ns)
    assert np.abs(nearly_noise - eps).max() < 0.1


def test_noise_sample_rejects_out_of_range():
    ns = make_schedule(10)
    with pytest.raises(ValueError):
        noise_sample(np.zeros(1, np.float32), 11, np.zeros(1, np.float32), ns)


def test_noise_sample_variance_monte_carlo():
    ns = make_schedule(1000)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=16).astype(np.float32)
    x0 /= np.linalg.norm(x0)  # fixed unit-norm input: Var(x0) term is 0
    for t in (100, 500, 900):
        draws = np.stack([
            noise_sample(x0, t, rng.standard_normal(16).astype(np.float32), ns)
            for _ in range(10_000)])
        expect = 1.0 - ns.alpha_bar_at(t)
        got = draws.var(axis=0).mean()  # per-coordinate variance across draws
        assert abs(got - expect) / expect < 0.03


# ---------------------------------------------------------------------------
# spacing and ddim
# ---------------------------------------------------------------------------


def test_spacing_examples():
    assert spacing(1, 1000) == [1000.0]
    assert spacing(4, 1000) == [1000.0, 750.0, 500.0, 250.0]
    assert spacing(10, 10) == [10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]
    with pytest.raises(ValueError):
        spacing(0, 100)
    with pytest.raises(ValueError):
        spacing(101, 100)


def test_ddim_inverts_known_noise():
    ns = make_schedule(1000)
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(4,)).astype(np.float32)
    eps = rng.normal(size=(4,)).astype(np.float32)
    x_t = noise_sample(x0, 600, eps, ns)
    # with the exact generating eps, one step to 0 recovers x0
    out = ddim_step(x_t, eps, 600, 0, ns)
    assert np.allclose(out, x0, atol=1e-4)


def test_ddim_final_step_returns_x0_pred():
    ns = make_schedule(1000)
    x_t = np.array([0.3], np.float32)
    eps = np.array([0.1], np.float32)
    ab = ns.alpha_bar_at(50)
    expect = (x_t - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
    assert np.allclose(ddim_step(x_t, eps, 50, 0, ns), expect, atol=1e-5)


def test_ddim_halfstep_composition_with_constant_model():
    # algebraic consistency: a constant-eps predictor makes DDIM exactly
    # composable across intermediate steps
    ns = make_schedule(1000)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(8,)).astype(np.float32)
    eps = rng.normal(size=(8,)).astype(np.float32) * 0.3
    one = ddim_step(x, eps, 1000, 500, ns)
    two = ddim_step(ddim_step(x, eps, 1000, 750, ns), eps, 750, 500, ns)
    assert np.allclose(one, two, rtol=1e-4, atol=1e-4)


def test_ddim_validates_order():
    ns = make_schedule(1000)
    with pytest.raises(ValueError):
        ddim_step(np.zeros(1, np.float32), np.zeros(1, np.float32), 100, 100, ns)


# ---------------------------------------------------------------------------
# t_post rules
# ---------------------------------------------------------------------------


def test_t_post_uniform_values():
    assert t_post_uniform(1000, 100) == 950.0
    assert t_post_uniform(100, 100) == 50.0
    assert t_post_uniform(77.5, 0) == 77.5
    with pytest.raises(ValueError):
        t_post_uniform(10, -1)


def test_t_post_rescaled_values():
    assert abs(t_post_rescaled(1000, 100, 12, 28) - 957.142857142857) < 1e-9
    assert t_post_rescaled(500, 40, 6, 6) == 500 - 40
    assert t_post_rescaled(123.0, 0, 3, 6) == 123.0
    with pytest.raises(ValueError):
        t_post_rescaled(100, 10, 7, 6)


def test_t_post_annealed_values():
    assert abs(t_post_annealed(900, 100, 12, 28, "n_over_m") - 690.0) < 1e-9
    got = t_post_annealed(900, 100, 12, 28, "m_over_n")
    assert abs(got - (900 - 100 * (12 / 28) * 0.9)) < 1e-9
    # tiny shift falls back to the floor of 10
    assert t_post_annealed(500, 1, 6, 6, "n_over_m") == 490.0
    # clamped at zero
    assert t_post_annealed(8, 0, 6, 6) == 0.0


# ---------------------------------------------------------------------------
# plans and presets
# ---------------------------------------------------------------------------


def test_preset_skip_inner_counts():
    plan10 = make_plan(10, 1000, "rescaled", "skip_inner", (8, 19), 28)
    assert plan10.feedback_steps == 4
    assert [k for k, f in enumerate(plan10.feedback, start=1) if f] == [1, 2, 9, 10]
    plan12 = make_plan(12, 1000, "rescaled", "skip_inner", (8, 19), 28)
    assert plan12.feedback_steps == 4
    assert sum(not f for f in plan12.feedback[2:10]) == 8  # middle 8 skipped


def test_preset_all_and_alternating():
    assert make_plan(6, 1000, "uniform", "all", (0, 1), 4).feedback_steps == 6
    alt = make_plan(6, 1000, "uniform", "alternating", (0, 1), 4)
    assert alt.feedback == (True, False, True, False, True, False)


def test_preset_first_last_outer():
    first = make_plan(8, 1000, "uniform", "first_only", (0, 1), 4)
    assert first.feedback == (True,) * 4 + (False,) * 4
    last = make_plan(8, 1000, "uniform", "last_only", (0, 1), 4)
    assert last.feedback == (False,) * 4 + (True,) * 4
    outer = make_plan(8, 1000, "uniform", "outer_only", (0, 1), 4)
    inner_span = [not f for f in make_plan(8, 1000, "uniform", "skip_inner",
                                           (0, 1), 4).feedback]
    # outer placement is the complement of the inner span
    assert list(outer.feedback) == [not f for f in inner_span]


def test_preset_too_small_raises():
    with pytest.raises(ValueError):
        make_plan(4, 1000, "uniform", "skip_inner", (0, 1), 4)
    with pytest.raises(ValueError):
        make_plan(1, 1000, "uniform", "alternating", (0, 1), 4)


def test_plan_validation():
    with pytest.raises(ValueError):
        InferencePlan(steps=(100.0, 200.0), feedback=(True, True),
                      tpost_mode="uniform", orientation="n_over_m",
                      loop_start=0, loop_end=1, n_blocks=4, T=1000)
    with pytest.raises(ValueError):
        make_plan(4, 1000, "bogus", "all", (0, 1), 4)
    with pytest.raises(ValueError):
        make_plan(4, 1000, "uniform", "all", (3, 1), 4)


def test_plan_tpost_clamps_and_orders():
    plan = make_plan(8, 1000, "annealed", "all", (0, 5), 6)
    for k in range(plan.S):
        tp = plan.t_post(k)
        assert 0.0 <= tp <= plan.steps[k]
    # first annealed step must match the rescaled rule exactly
    t0, i0 = plan.steps[0], plan.gap(0)
    assert plan.t_post(0) == t_post_rescaled(t0, i0, plan.m, plan.n_blocks)
    # later steps use the annealed rule
    t1, i1 = plan.steps[1], plan.gap(1)
    assert plan.t_post(1) == t_post_annealed(t1, i1, plan.m, plan.n_blocks,
                                             "n_over_m", 1000.0)


def test_plan_gap_uses_next_step_and_final_reaches_zero():
    plan = make_plan(4, 1000, "uniform", "all", (0, 1), 4)
    assert [plan.gap(k) for k in range(4)] == [250.0, 250.0, 250.0, 250.0]


# ---------------------------------------------------------------------------
# closed-form costs
# ---------------------------------------------------------------------------


def test_cost_closed_forms_match_published_counts():
    assert baseline_block_cost(28, 20) == 560
    assert baseline_block_cost(28, 12) == 336
    assert ilf_block_cost(28, 10, 12, 4) == 332
    assert ilf_block_cost(28, 12, 6, 12) == 420
    assert ilf_block_cost(28, 12, 12, 4) == 388
    assert cached_block_cost(28, 20, 18, 3) == 326
    assert cached_block_cost(28, 20, 18, 2) == 380


def test_refresh_count_phasing():
    assert refresh_count(20, 3) == 7
    assert refresh_count(20, 2) == 10
    assert refresh_count(5, 1) == 5
    with pytest.raises(ValueError):
        refresh_count(5, 0)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@pytest.fixture
def sampler_setup():
    cfg = tiny_config(T=1000)
    model = DiT(cfg, np.random.default_rng(31))
    randomize(model, np.random.default_rng(32), 0.08)
    model.set_trainable(False)
    fs = make_feedback(model, 1, 2, np.random.default_rng(33))
    fs.set_trainable(False)
    ns = make_schedule(cfg.T)
    return model, fs, ns


def test_sample_deterministic_and_counts(sampler_setup):
    model, fs, ns = sampler_setup
    plan = make_plan(5, 1000, "rescaled", "skip_inner", (1, 2), model.cfg.n_blocks)
    a = sample("ilf", model, ns, plan, 1, seed=5, fs=fs, n_samples=2)
    b = sample("ilf", model, ns, plan, 1, seed=5, fs=fs, n_samples=2)
    assert np.array_equal(a.images, b.images)
    n, m = model.cfg.n_blocks, fs.m
    assert a.block_forwards == ilf_block_cost(n, 5, m, plan.feedback_steps)


def test_sample_baseline_cost_and_shape(sampler_setup):
    model, _, ns = sampler_setup
    plan = make_plain_plan(6, 1000, model.cfg.n_blocks)
    res = sample("baseline", model, ns, plan, 0, seed=9, n_samples=3)
    assert res.images.shape == (3, 1, 8, 8)
    assert res.block_forwards == baseline_block_cost(model.cfg.n_blocks, 6)
    assert res.cost_row()["block_forwards"] == res.block_forwards


def test_sigma_rule_ddim_never_sees_tpost(sampler_setup):
    model, fs, ns = sampler_setup
    plan = make_plan(5, 1000, "rescaled", "all", (1, 2), model.cfg.n_blocks)
    res = sample("ilf", model, ns, plan, 1, seed=6, fs=fs)
    assert [p[0] for p in res.ddim_pairs] == list(plan.steps)
    nxt = list(plan.steps[1:]) + [0.0]
    assert [p[1] for p in res.ddim_pairs] == nxt
    tposts = {plan.t_post(k) for k in range(plan.S)}
    seen = {p[0] for p in res.ddim_pairs} | {p[1] for p in res.ddim_pairs}
    assert not (tposts & seen - {0.0} - set(plan.steps))


def test_sample_requires_feedback_state(sampler_setup):
    model, _, ns = sampler_setup
    plan = make_plan(5, 1000, "rescaled", "all", (1, 2), model.cfg.n_blocks)
    with pytest.raises(ValueError):
        sample("ilf", model, ns, plan, 0, seed=1)


def test_sample_round_robin_labels(sampler_setup):
    model, _, ns = sampler_setup
    plan = make_plain_plan(3, 1000, model.cfg.n_blocks)
    res = sample("baseline", model, ns, plan, None, seed=2, n_samples=6)
    assert res.labels == [0, 1, 2, 3, 0, 1]


def test_sample_rejects_unknown_kind(sampler_setup):
    model, _, ns = sampler_setup
    plan = make_plain_plan(3, 1000, model.cfg.n_blocks)
    with pytest.raises(ValueError):
        sample("mystery", model, ns, plan, 0, seed=1)
