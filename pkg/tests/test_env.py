import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2sac.env import (
    AspEnv, AspProfile, EnvConfig, InvalidField, TaskRequest, generate_fleet, generate_workload,
    normalize, normalize_obs, obs_field_max, read_fleet_csv, read_workload_csv, utility,
    write_fleet_csv, write_workload_csv,
)
from d2sac.baselines import CrashAvoidPolicy, RandomPolicy, run_episode


def one_asp_env(capacity=400, episode_length=2, penalty=2.0, baseline=0.0):
    cfg = EnvConfig(num_asps=1, capacity_range=(capacity, capacity), step_range=(1, 400),
                    duration_range=(1.0, 5000.0), num_tasks=episode_length, episode_length=episode_length,
                    crash_penalty=penalty, reward_baseline=baseline)
    fleet = [AspProfile(capacity, 50.0, 0.25, 200.0, 0.75)]
    return AspEnv(cfg, fleet)


# -- workload ---------------------------------------------------------------


def test_workload_mean_gap_matches_rate():
    wl = generate_workload(np.random.default_rng(0), 1000, 0.001)
    gaps = np.diff([0.0] + [t.arrival_time for t in wl])
    assert abs(gaps.mean() - 1000.0) <= 100.0


def test_workload_step_range():
    wl = generate_workload(np.random.default_rng(1), 1000, 0.001, step_range=(100, 250))
    steps = [t.steps for t in wl]
    assert min(steps) >= 100 and max(steps) <= 250


def test_workload_deterministic():
    a = generate_workload(np.random.default_rng(5), 200, 0.001)
    b = generate_workload(np.random.default_rng(5), 200, 0.001)
    assert a == b


@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1.0))
@settings(max_examples=30, deadline=None)
def test_workload_invariants(seed, rate):
    wl = generate_workload(np.random.default_rng(seed), 50, rate, (100, 250), (5000.0, 20000.0))
    arrivals = [t.arrival_time for t in wl]
    assert all(x <= y for x, y in zip(arrivals, arrivals[1:]))
    assert all(100 <= t.steps <= 250 and 5000.0 <= t.duration <= 20000.0 for t in wl)


@pytest.mark.parametrize("kwargs", [
    dict(num_tasks=10, arrival_rate=0.0),
    dict(num_tasks=0, arrival_rate=0.001),
    dict(num_tasks=10, arrival_rate=0.001, step_range=(250, 100)),
    dict(num_tasks=10, arrival_rate=0.001, duration_range=(2.0, 1.0)),
])
def test_workload_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        generate_workload(np.random.default_rng(0), **kwargs)


# -- utility ----------------------------------------------------------------


ASP = AspProfile(400, 50.0, 0.25, 200.0, 0.75)


def test_utility_interpolates():
    assert utility(ASP, 125) == pytest.approx(0.5, abs=1e-12)


def test_utility_clamps():
    assert utility(ASP, 50) == 0.25
    assert utility(ASP, 0) == 0.25
    assert utility(ASP, 2000) == 0.75


@given(st.floats(0, 100), st.floats(0, 0.5), st.floats(150, 250), st.floats(0.5, 1.0),
       st.floats(0, 500), st.floats(0, 500))
def test_utility_monotone_and_bounded(ax, ay, bx, by, t1, t2):
    asp = AspProfile(400, ax, ay, bx, by)
    lo, hi = sorted((t1, t2))
    assert 0.0 <= utility(asp, lo) <= utility(asp, hi) <= 1.0


# -- reset / step -----------------------------------------------------------


def default_env(seed=0, **overrides):
    cfg = EnvConfig(**overrides)
    fleet = generate_fleet(np.random.default_rng(seed), cfg)
    return AspEnv(cfg, fleet, np.random.default_rng(seed + 1))


def test_fleet_respects_anchor_ranges():
    cfg = EnvConfig()
    for a in generate_fleet(np.random.default_rng(3), cfg):
        assert 400 <= a.capacity <= 1000
        assert 0 <= a.a_x <= 100 and 150 <= a.b_x <= 250
        assert 0 <= a.a_y <= 0.5 <= a.b_y <= 1


def test_reset_observation():
    env = default_env()
    obs = env.reset()
    assert obs.shape == (42,)
    assert np.array_equal(obs[2::2], obs[3::2])
    assert env.running_count == 0
    assert env.clock == env.workload[0].arrival_time


def test_reset_deterministic():
    a = default_env(4).reset()
    b = default_env(4).reset()
    assert np.array_equal(a, b)


def test_accept_on_empty_asp():
    env = one_asp_env()
    env.reset([TaskRequest(0, 0.0, 100, 1000.0), TaskRequest(1, 10.0, 100, 1000.0)])
    out = env.step(0)
    assert out.reward == 0.0 and not out.info.crashed
    assert env.available()[0] == 300


def test_crash_penalty_hand_example():
    env = one_asp_env()
    env.reset([TaskRequest(0, 0.0, 350, 1000.0), TaskRequest(1, 500.0, 100, 1000.0)])
    env.step(0)
    out = env.step(0)
    assert out.info.crashed
    assert out.info.penalty == pytest.approx(3.0, abs=1e-12)
    assert out.reward == pytest.approx(-3.0, abs=1e-12)
    assert out.info.interrupted == [0]
    assert out.done
    # the running task restarted from the crash instant
    assert env.asps[0].running[0].finish == pytest.approx(1500.0)
    assert env.metrics()["lost_utility"] == pytest.approx(utility(env.fleet[0], 100))


def test_completion_credited_once():
    env = one_asp_env(episode_length=3, baseline=0.1)
    wl = [TaskRequest(0, 0.0, 125, 100.0), TaskRequest(1, 200.0, 50, 1000.0), TaskRequest(2, 300.0, 50, 1000.0)]
    env.reset(wl)
    first = env.step(0)
    assert first.info.completed == [0]
    assert first.reward == pytest.approx(0.5 - 0.1, abs=1e-12)
    second = env.step(0)
    assert second.info.completed == [] and second.reward == 0.0
    third = env.step(0)
    assert third.info.completed == [] and third.done
    assert env.metrics()["obtained_utility"] == pytest.approx(0.5)


def test_step_errors():
    env = one_asp_env()
    env.reset([TaskRequest(0, 0.0, 100, 1000.0), TaskRequest(1, 10.0, 100, 1000.0)])
    with pytest.raises(ValueError):
        env.step(1)
    with pytest.raises(ValueError):
        env.step(-1)
    env.step(0)
    env.step(0)
    with pytest.raises(RuntimeError):
        env.step(0)


@pytest.mark.parametrize("kwargs,field", [
    (dict(num_asps=0), "num_asps"),
    (dict(num_tasks=0, episode_length=0), "num_tasks"),
    (dict(arrival_rate=-1.0), "arrival_rate"),
    (dict(step_range=(250, 100)), "step_range"),
])
def test_config_rejects(kwargs, field):
    with pytest.raises(InvalidField) as exc:
        EnvConfig(**kwargs).validate()
    assert exc.value.field == field


# -- normalization ----------------------------------------------------------


def test_normalize_open_interval_ends():
    assert normalize(0.0, 250.0) == pytest.approx(1 / 252)
    assert normalize(250.0, 250.0) == pytest.approx(251 / 252)
    assert 0 < normalize(0.0, 250.0) and normalize(250.0, 250.0) < 1


@given(st.integers(0, 1000), st.integers(0, 1000))
def test_normalize_strictly_monotone(x, y):
    if x < y:
        assert normalize(x, 1000.0) < normalize(y, 1000.0)


def test_normalize_obs_uses_field_maxima():
    cfg = EnvConfig()
    m = obs_field_max(cfg)
    assert m[0] == 250 and m[1] == cfg.duration_range[1] and np.all(m[2:] == 1000)
    raw = np.concatenate([[250, 0], np.zeros(40)])
    assert normalize_obs(raw, cfg)[0] == pytest.approx(251 / 252)


# -- invariants over whole episodes -----------------------------------------


@given(st.integers(0, 10_000), st.sampled_from(["random", "crash_avoid"]), st.floats(0.001, 0.01))
@settings(max_examples=15, deadline=None)
def test_episode_invariants(seed, kind, rate):
    env = default_env(seed, num_tasks=150, episode_length=150, arrival_rate=rate)
    policy = RandomPolicy(20) if kind == "random" else CrashAvoidPolicy()
    rng = np.random.default_rng(seed)
    obs = env.reset()
    clock = env.clock
    credits = penalties = 0.0
    done = False
    while not done:
        fits = env.available().max() >= env.current_task.steps
        out = env.step(policy.act(obs, rng))
        obs, done = out.observation, out.done
        if kind == "crash_avoid" and fits:
            assert not out.info.crashed
        assert env.clock >= clock
        clock = env.clock
        for asp in env.asps:
            held = sum(r.steps for r in asp.running)
            assert held == asp.held and 0 <= asp.available <= asp.profile.capacity
            assert all(r.finish == r.start + r.duration for r in asp.running)
        assert np.all((obs > 0) & (obs < 1))
        assert np.isfinite(out.reward)
        credits += out.info.credits
        penalties += out.info.penalty
    m = env.metrics()
    assert m["finished"] + m["crashed"] + m["running"] == m["arrived"] == 150
    assert m["reward"] == pytest.approx(credits - penalties, abs=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_crash_avoid_zero_crashes_on_default_workload(seed):
    env = default_env(seed)
    m = run_episode(CrashAvoidPolicy(), env, np.random.default_rng(seed))
    assert m["arrived"] == 1000
    assert m["crashed_rate"] == 0.0


# -- CSV interchange --------------------------------------------------------


def test_workload_csv_round_trip(tmp_path):
    wl = generate_workload(np.random.default_rng(9), 50, 0.001)
    write_workload_csv(tmp_path / "w.csv", wl)
    assert read_workload_csv(tmp_path / "w.csv") == wl
    assert (tmp_path / "w.csv").read_text().splitlines()[0] == "id,arrival_time,steps,duration"


def test_fleet_csv_round_trip(tmp_path):
    fleet = generate_fleet(np.random.default_rng(9), EnvConfig())
    write_fleet_csv(tmp_path / "f.csv", fleet)
    assert read_fleet_csv(tmp_path / "f.csv") == fleet
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "asp_id,capacity,A_x,A_y,B_x,B_y"
