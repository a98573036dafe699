import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from d2sac.agod import (
    TRACE_COLUMNS, ActionDistribution, ActorNetwork, build_vp_schedule, denoise_step, entropy, forward_marginal,
    forward_transition, noise_scale, reverse_chain, sample_action_distribution, select_action, softmax,
    trace_rows, write_trace_csv,
)
from d2sac.nn import ComputeGraph, Tensor


def zero_head(actor: ActorNetwork) -> ActorNetwork:
    last = actor.trunk[-1]
    last.weights.values[...] = 0.0
    last.biases.values[...] = 0.0
    return actor


# -- schedule -----------------------------------------------------------------


def test_first_beta_value():
    s = build_vp_schedule(5, 0.1, 10.0)
    assert s.beta[1] == pytest.approx(1 - math.exp(-0.02 - 0.198), abs=1e-15)
    # 1 - e^-0.218 = 0.195875 (the four-digit figure 0.1959 is a rounding of it)
    assert s.beta[1] == pytest.approx(0.1958745583, abs=1e-10)
    assert s.beta[1] == pytest.approx(0.19594, abs=1e-4)


def test_schedule_tables_consistent():
    s = build_vp_schedule(7, 0.1, 10.0)
    np.testing.assert_allclose(s.alpha[1:], 1 - s.beta[1:])
    np.testing.assert_allclose(s.alpha_bar[1:], np.cumprod(s.alpha[1:]))
    assert s.alpha_bar[0] == 1.0
    assert s.tilde_beta[1] == 0.0
    for t in range(2, 8):
        assert s.tilde_beta[t] == pytest.approx((1 - s.alpha_bar[t - 1]) / (1 - s.alpha_bar[t]) * s.beta[t])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.floats(1e-3, 5.0), st.floats(0.01, 20.0))
def test_schedule_monotone(T, beta_min, gap):
    s = build_vp_schedule(T, beta_min, beta_min + gap)
    b = s.beta[1:]
    assert np.all((b > 0) & (b < 1))
    assert np.all(np.diff(b) > 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[T] <= s.alpha_bar[1]


@pytest.mark.parametrize("args", [(0, 0.1, 10.0), (5, 10.0, 10.0), (5, 2.0, 1.0), (5, 0.0, 1.0)])
def test_schedule_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        build_vp_schedule(*args)


# -- forward process ------------------------------------------------------------


def test_forward_marginal_degenerate_cases():
    s = build_vp_schedule(5)
    x0 = np.array([1.0, -2.0, 0.5])
    eps = np.array([0.3, 0.1, -1.0])
    np.testing.assert_allclose(forward_marginal(x0, 3, s, np.zeros(3)), math.sqrt(s.alpha_bar[3]) * x0)
    np.testing.assert_allclose(forward_marginal(np.zeros(3), 3, s, eps), math.sqrt(1 - s.alpha_bar[3]) * eps)


def test_forward_marginal_errors():
    s = build_vp_schedule(5)
    with pytest.raises(ValueError):
        forward_marginal(np.zeros(3), 1, s, np.zeros(4))
    with pytest.raises(ValueError):
        forward_marginal(np.zeros(3), 6, s, np.zeros(3))


@pytest.mark.parametrize("t", [1, 3, 5])
def test_iterated_transitions_match_closed_form(t):
    s = build_vp_schedule(5)
    rng = np.random.default_rng(2024 + t)
    n = 10_000
    x0 = np.array([1.0, -0.5, 2.0, 0.0])
    x = np.tile(x0, (n, 1))
    for k in range(1, t + 1):
        x = forward_transition(x, k, s, rng.standard_normal(x.shape))
    closed = forward_marginal(np.tile(x0, (n, 1)), t, s, rng.standard_normal((n, 4)))
    mu, var = math.sqrt(s.alpha_bar[t]) * x0, 1 - s.alpha_bar[t]
    for sample in (x, closed):
        se_mean = np.sqrt(var / n)
        se_var = var * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(sample.mean(0) - mu) <= 3 * se_mean)
        assert np.all(np.abs(sample.var(0, ddof=1) - var) <= 3 * se_var)
    diff_se = np.sqrt(x.var(0, ddof=1) / n + closed.var(0, ddof=1) / n)
    assert np.all(np.abs(x.mean(0) - closed.mean(0)) <= 3 * diff_se)


# -- reverse step ---------------------------------------------------------------


@pytest.fixture
def small_actor():
    return ActorNetwork(6, 4, np.random.default_rng(0), hidden=16, t_dim=8)


def test_last_step_is_noiseless(small_actor):
    s = build_vp_schedule(5)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 4)))
    state = Tensor(np.random.default_rng(2).random((1, 6)))
    a = denoise_step(x, 1, state, small_actor, s, np.zeros(4)).values
    b = denoise_step(x, 1, state, small_actor, s, np.full(4, 100.0)).values
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("mode", ["quadratic", "ddpm"])
def test_zero_head_step(small_actor, mode):
    zero_head(small_actor)
    s = build_vp_schedule(5)
    x = np.random.default_rng(1).normal(size=(1, 4))
    noise = np.random.default_rng(3).normal(size=(1, 4))
    out = denoise_step(Tensor(x), 4, Tensor(np.ones((1, 6))), small_actor, s, noise, noise_scale_mode=mode).values
    scale = (s.tilde_beta[4] / 2) ** 2 if mode == "quadratic" else math.sqrt(s.tilde_beta[4])
    np.testing.assert_allclose(out, x / math.sqrt(s.alpha[4]) + scale * noise, rtol=1e-14)


def test_reverse_mean_formula(small_actor):
    s = build_vp_schedule(5)
    x = np.random.default_rng(1).normal(size=(2, 4))
    state = np.random.default_rng(2).random((2, 6))
    eps = small_actor.eps(ComputeGraph(enabled=False), Tensor(x), 3, Tensor(state)).values
    assert np.all(np.abs(eps) < 1)
    out = denoise_step(Tensor(x), 3, Tensor(state), small_actor, s, np.zeros((2, 4))).values
    expected = (x - s.beta[3] * eps / math.sqrt(1 - s.alpha_bar[3])) / math.sqrt(s.alpha[3])
    np.testing.assert_allclose(out, expected, rtol=1e-13)


def test_denoise_step_range(small_actor):
    s = build_vp_schedule(5)
    with pytest.raises(ValueError):
        denoise_step(Tensor(np.zeros((1, 4))), 0, Tensor(np.zeros((1, 6))), small_actor, s, np.zeros(4))
    with pytest.raises(ValueError):
        denoise_step(Tensor(np.zeros((1, 4))), 6, Tensor(np.zeros((1, 6))), small_actor, s, np.zeros(4))


def test_noise_scale_modes():
    s = build_vp_schedule(5)
    assert noise_scale(s, 1) == 0.0
    assert noise_scale(s, 3, "quadratic") == pytest.approx((s.tilde_beta[3] / 2) ** 2)
    assert noise_scale(s, 3, "ddpm") == pytest.approx(math.sqrt(s.tilde_beta[3]))
    with pytest.raises(ValueError):
        noise_scale(s, 3, "other")


# -- sampling -------------------------------------------------------------------


def test_sampling_is_reproducible(small_actor):
    s = build_vp_schedule(5)
    state = np.random.default_rng(2).random(6)
    a = sample_action_distribution(state, small_actor, s, np.random.default_rng(9))
    b = sample_action_distribution(state, small_actor, s, np.random.default_rng(9))
    assert a.probs.tobytes() == b.probs.tobytes()
    assert a.x0.tobytes() == b.x0.tobytes()


def test_zero_actor_probs_are_softmax_of_propagated_noise(small_actor):
    zero_head(small_actor)
    s = build_vp_schedule(5)
    rng = np.random.default_rng(4)
    dist = sample_action_distribution(np.ones(6), small_actor, s, rng)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 4))
    noise = rng.standard_normal((5, 1, 4))
    for t in range(5, 0, -1):
        x = x / math.sqrt(s.alpha[t]) + noise_scale(s, t) * noise[t - 1]
    np.testing.assert_allclose(dist.probs, softmax(x)[0], rtol=1e-12)


def test_tracing_does_not_change_samples(small_actor):
    s = build_vp_schedule(5)
    state = np.random.default_rng(2).random(6)
    rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
    plain = sample_action_distribution(state, small_actor, s, rng_a)
    traced = sample_action_distribution(state, small_actor, s, rng_b, trace=True)
    assert plain.probs.tobytes() == traced.probs.tobytes()
    assert rng_a.random() == rng_b.random()
    assert len(traced.trace) == 6
    np.testing.assert_array_equal(traced.trace[-1], traced.x0)


def test_recorded_and_inference_paths_agree(small_actor):
    s = build_vp_schedule(5)
    state = Tensor(np.random.default_rng(2).random((3, 6)))
    x1, _ = reverse_chain(ComputeGraph(), small_actor, s, state, np.random.default_rng(7))
    x2, _ = reverse_chain(ComputeGraph(enabled=False), small_actor, s, state, np.random.default_rng(7))
    np.testing.assert_allclose(x1.values, x2.values, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_distribution_validity(seed, T):
    actor = ActorNetwork(6, 5, np.random.default_rng(seed), hidden=16, t_dim=8)
    s = build_vp_schedule(T)
    state = np.random.default_rng(seed + 1).random((4, 6))
    dist = sample_action_distribution(state, actor, s, np.random.default_rng(seed + 2))
    assert dist.probs.shape == (4, 5)
    assert np.all(dist.probs > 0)
    np.testing.assert_allclose(dist.probs.sum(axis=1), 1.0, atol=1e-12)
    h = entropy(dist)
    assert np.all(h >= 0) and np.all(h <= math.log(5) + 1e-12)


def test_untrained_mean_probs_near_uniform():
    # Uniformity comes from symmetry over initializations, so each sample gets a fresh actor;
    # any single fixed actor is tilted by its random weights.
    s = build_vp_schedule(5)
    state = np.random.default_rng(12).random((1, 42))
    init_rng, noise_rng = np.random.default_rng(11), np.random.default_rng(13)
    probs = np.array([
        sample_action_distribution(state, ActorNetwork(42, 20, init_rng), s, noise_rng).probs[0]
        for _ in range(1000)
    ])
    assert np.all(np.abs(probs.mean(axis=0) - 0.05) <= 0.02)


def test_state_dimension_checked(small_actor):
    with pytest.raises(ValueError):
        sample_action_distribution(np.ones(7), small_actor, build_vp_schedule(5), np.random.default_rng(0))


# -- gradient through the chain ---------------------------------------------------


def chain_loss(actor, schedule, states, q, seed, alpha=0.05, graph=None):
    graph = graph if graph is not None else ComputeGraph(enabled=False)
    x0, _ = reverse_chain(graph, actor, schedule, Tensor(states), np.random.default_rng(seed))
    p = graph.softmax(x0)
    neg_h = graph.rowdot(p, graph.log_softmax(x0))
    return graph.mean(graph.sub(graph.scale(neg_h, alpha), graph.rowdot(p, Tensor(q))))


def max_rel_error(actor, loss_fn, h=1e-5, floor=1e-6):
    graph = ComputeGraph()
    grads = graph.backward(loss_fn(graph), actor.parameters())
    worst = 0.0
    for p in actor.parameters():
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(None).item()
            flat[i] = orig - h
            down = loss_fn(None).item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = grads[p].reshape(-1)[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
    return worst


def test_chain_gradient_matches_finite_differences():
    actor = ActorNetwork(3, 4, np.random.default_rng(0), hidden=6, t_dim=4)
    s = build_vp_schedule(5)
    states = np.random.default_rng(1).random((3, 3))
    q = np.random.default_rng(2).normal(size=(3, 4))
    err = max_rel_error(actor, lambda g: chain_loss(actor, s, states, q, 5, graph=g))
    assert err <= 1e-3


# -- selection and entropy --------------------------------------------------------


def test_greedy_selection():
    assert select_action([0.1, 0.7, 0.2], "greedy") == 1
    assert select_action([0.4, 0.2, 0.4], "greedy") == 0


def test_one_hot_sampling():
    rng = np.random.default_rng(0)
    assert all(select_action([0, 0, 1.0, 0], "sample", rng) == 2 for _ in range(1000))


def test_uniform_sampling_frequencies():
    rng = np.random.default_rng(0)
    draws = [select_action([0.25] * 4, "sample", rng) for _ in range(100_000)]
    freq = np.bincount(draws, minlength=4) / 100_000
    assert np.all(np.abs(freq - 0.25) <= 0.01)


def test_selection_errors():
    with pytest.raises(ValueError):
        select_action([0.5, 0.5], "sample")
    with pytest.raises(ValueError):
        select_action([0.5, 0.5], "best", np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.sampled_from(["exp", "cube", "affine"]))
def test_greedy_invariant_to_monotone_maps(x, kind):
    x = np.asarray(x)
    top = np.sort(x)[-2:]
    # near-ties below float resolution collapse under softmax
    assume(top[1] - top[0] >= 1e-3)
    f = {"exp": np.exp, "cube": lambda v: v ** 3, "affine": lambda v: 3 * v - 7}[kind]
    y = f(x) / max(1.0, np.abs(f(x)).max() / 50)
    assert select_action(softmax(x), "greedy") == select_action(softmax(y), "greedy") == int(np.argmax(x))


def test_entropy_examples():
    assert entropy(np.full(20, 0.05)) == pytest.approx(math.log(20), abs=1e-12)
    assert entropy(np.eye(5)[2]) == 0.0
    p = np.zeros(20)
    p[:2] = 0.5
    assert entropy(p) == pytest.approx(math.log(2), abs=1e-12)
    assert entropy(ActionDistribution(np.full(4, 0.25), np.zeros(4))) == pytest.approx(math.log(4))


# -- trace export -----------------------------------------------------------------


def test_trace_rows_count_down_from_T(tmp_path, small_actor):
    s = build_vp_schedule(5)
    dist = sample_action_distribution(np.ones(6), small_actor, s, np.random.default_rng(0), trace=True)
    rows = trace_rows(7, dist.trace)
    assert len(rows) == 6 * 4
    assert sorted({r[1] for r in rows}) == [0, 1, 2, 3, 4, 5]
    path = tmp_path / "trace.csv"
    write_trace_csv(path, rows)
    write_trace_csv(path, rows, append=True)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == 1 + 2 * len(rows)
