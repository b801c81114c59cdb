import numpy as np
import pytest

import pacelearn.nn_core as nn
from pacelearn.rl_agent import (
    ACTIONS, N_ACTIONS, OBS_DIM, AgentTrainConfig, LogItem, PacingEnv, Policy, ReplayMemory,
    StateBaseline, action_index, discounted_return, final_byte, fit, load_policy, mean_reward_of,
    next_action, observation, policy_gradient, reference_policy, run_episode, save_policy,
    train_on_replay, uniform_policy,
)
from pacelearn.trace_model import Symbol


class FakeRM:
    """Grades a log by a fixed rule on its final symbol."""

    def __init__(self, log_len, rule=lambda s: 1.0):
        self.window = log_len
        self.log_len = log_len + 1
        self.rule = rule

    def grade(self, symbols):
        assert len(symbols) == self.log_len
        return self.rule(symbols[-1])


def test_discounted_return_examples():
    assert discounted_return([1], 0.98) == 1.0
    assert discounted_return([1, 1], 0.5) == 1.5
    assert np.isclose(discounted_return([0, 0, 1], 0.9), 0.81)
    with pytest.raises(ValueError):
        discounted_return([1], 1.0)


def test_config_validation_and_schedule():
    cfg = AgentTrainConfig(episodes=11, explore_start=0.1, explore_end=0.0)
    assert cfg.explore_rate(0) == 0.1 and cfg.explore_rate(10) == 0.0
    assert np.isclose(cfg.explore_rate(5), 0.05)
    for bad in ({"replay_size": 0}, {"discount": 1.0}, {"baseline": "median"}, {"explore_start": 2.0}):
        with pytest.raises(ValueError):
            AgentTrainConfig(**bad)


def test_full_exploration_is_uniform():
    policy = Policy(seed=0)
    policy.store["b3"].data[...] = [10.0, -10.0, -10.0]
    rng = np.random.default_rng(0)
    obs = np.zeros(OBS_DIM)
    counts = np.bincount([next_action(policy, obs, 1.0, rng) for _ in range(10_000)], minlength=3)
    sigma = np.sqrt(10_000 * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - 10_000 / 3) < 3 * sigma)


def test_confident_policy_without_exploration():
    policy = Policy(seed=0)
    policy.store["W3"].data[...] = 0.0
    policy.store["b3"].data[...] = [10.0, -10.0, -10.0]
    rng = np.random.default_rng(1)
    picks = [next_action(policy, np.zeros(OBS_DIM), 0.0, rng) for _ in range(2000)]
    assert np.mean(np.array(picks) == action_index(Symbol.AP)) >= 0.999
    a = [next_action(policy, np.ones(OBS_DIM), 0.5, np.random.default_rng(7)) for _ in range(3)]
    b = [next_action(policy, np.ones(OBS_DIM), 0.5, np.random.default_rng(7)) for _ in range(3)]
    assert a == b


def test_observation_layout():
    env = PacingEnv("healthy", seed=0)
    obs = observation(env.pacer)
    byte = env.pacer.state_byte()
    assert obs.shape == (OBS_DIM,)
    assert [int(x) for x in obs[:8]] == [(byte >> k) & 1 for k in range(7, -1, -1)]
    assert np.all((0 <= obs[8:]) & (obs[8:] <= 1))


def test_replay_memory():
    mem = ReplayMemory(1)
    item = LogItem(np.zeros((2, OBS_DIM)), np.zeros(2, dtype=int), (), 1.0, False)
    mem.add(item)
    assert mem.full and len(mem) == 1
    with pytest.raises(OverflowError):
        mem.add(item)
    mem.clear()
    assert len(mem) == 0


def test_single_log_replay():
    cfg = AgentTrainConfig(replay_size=1, log_len=5)
    env = PacingEnv("healthy", history=6, seed=0)
    replay = run_episode(env, Policy(seed=0), FakeRM(5), cfg, np.random.default_rng(0), 0.1)
    assert len(replay) == 1
    (item,) = replay
    assert item.observations.shape == (5, OBS_DIM) and item.actions.shape == (5,)
    assert len(item.symbols) == 6 and item.reward == 1.0 and not item.done
    with pytest.raises(ValueError, match="does not match"):
        run_episode(env, Policy(seed=0), FakeRM(4), cfg, np.random.default_rng(0), 0.1)


def test_failed_log_resets_environment():
    cfg = AgentTrainConfig(replay_size=3, log_len=4)
    env = PacingEnv("healthy", history=5, seed=0)
    replay = run_episode(env, Policy(seed=0), FakeRM(4, lambda s: 0.0), cfg, np.random.default_rng(0), 0.0)
    assert all(it.done for it in replay)
    assert env.resets == 4


class RateRuleRM:
    """1.0 when no ventricular pace in the log follows a ventricular event within the URL."""

    window, log_len = 20, 21

    def __init__(self, url):
        self.url = url

    def grade(self, symbols):
        v = [t for t, s in enumerate(symbols) if s.is_ventricular]
        return float(all(y - x >= self.url for x, y in zip(v, v[1:]) if symbols[y] is Symbol.VP))


def test_reference_beats_uniform_under_a_rule_grader():
    env = PacingEnv("complete-av-block", history=21, seed=3)
    rm = RateRuleRM(env.config.url_ticks)
    assert mean_reward_of(reference_policy(env), env, rm, 100, 20) == 1.0
    env = PacingEnv("complete-av-block", history=21, seed=3)
    assert mean_reward_of(uniform_policy(np.random.default_rng(0)), env, rm, 100, 20) < 0.5


def replay_of(rewards, seed=0, log_len=4):
    rng = np.random.default_rng(seed)
    mem = ReplayMemory(len(rewards))
    for r in rewards:
        obs = rng.uniform(0, 1, size=(log_len, OBS_DIM))
        mem.add(LogItem(obs, rng.integers(0, N_ACTIONS, size=log_len), (), r, False))
    return mem


def log_probs(policy, item):
    p = policy.probs(item.observations)
    return np.log(p[np.arange(len(item.actions)), item.actions])


def test_equal_rewards_cancel_under_mean_baseline():
    policy = Policy(hidden=8, seed=0)
    before = {k: v.copy() for k, v in policy.store.state().items()}
    cfg = AgentTrainConfig(log_len=4, baseline="mean")
    train_on_replay(policy, replay_of([0.7, 0.7, 0.7]), cfg)
    assert all(np.array_equal(before[k], v) for k, v in policy.store.state().items())


def test_rewarded_log_becomes_more_likely():
    policy = Policy(hidden=8, seed=0)
    replay = replay_of([1.0])
    (item,) = replay
    before = log_probs(policy, item).sum()
    train_on_replay(policy, replay, AgentTrainConfig(log_len=4, baseline="none", step_size=1e-2))
    assert log_probs(policy, item).sum() > before


def test_surrogate_objective_and_gradient_match_oracle():
    policy = Policy(hidden=6, seed=2)
    policy.store = policy.store.astype(np.float64)
    replay = replay_of([1.0, 0.0], seed=5)
    cfg = AgentTrainConfig(log_len=4, discount=0.9, baseline="mean")
    w = 0.9 ** np.arange(3, -1, -1)

    def oracle():
        a, b = replay.items
        return (0.5 * (w * log_probs(policy, a)).sum() - 0.5 * (w * log_probs(policy, b)).sum()) / 2

    got = policy_gradient(policy, replay, cfg)
    assert np.isclose(got, oracle(), rtol=1e-12)
    grads = {k: g.copy() for k, g in policy.store.grads().items()}
    eps = 1e-6
    for name in ("W1", "b3"):
        t = policy.store[name]
        flat = t.data.reshape(-1)
        for i in range(0, flat.size, max(1, flat.size // 5)):
            old = flat[i]
            flat[i] = old + eps
            up = oracle()
            flat[i] = old - eps
            down = oracle()
            flat[i] = old
            assert np.isclose(grads[name].reshape(-1)[i], (up - down) / (2 * eps), rtol=1e-5, atol=1e-9)


def test_state_baseline_table():
    replay = replay_of([1.0, 0.0])
    a, b = replay.items
    a.observations[-1, :8] = [1, 1, 0, 0, 0, 0, 0, 0]
    b.observations[-1, :8] = [1, 1, 0, 0, 0, 0, 0, 0]
    assert final_byte(a) == 0b11000000
    table = StateBaseline(rate=0.5)
    assert table.value(0b11000000, 0.3) == 0.3
    table.update(replay)
    assert table.value(0b11000000, 0.3) == 0.5  # first sets 1.0, then halfway to 0.0
    with pytest.raises(ValueError, match="running table"):
        policy_gradient(Policy(hidden=4), replay, AgentTrainConfig(log_len=4, baseline="state"))


def test_zero_episodes_returns_initial_policy():
    cfg = AgentTrainConfig(episodes=0, log_len=4, hidden=8)
    res = fit(cfg, FakeRM(4))
    again = fit(cfg, FakeRM(4))
    assert res.curve == []
    assert all(np.array_equal(v, again.policy.store[k].data) for k, v in res.policy.store.state().items())


def test_fit_is_deterministic_and_learns_a_rule(tmp_path):
    wait_only = FakeRM(4, lambda s: float(s is Symbol.NONE))
    cfg = AgentTrainConfig(episodes=150, replay_size=8, log_len=4, hidden=8, step_size=0.02,
                           mode="healthy", baseline="mean", seed=1)
    a = fit(cfg, wait_only)
    b = fit(cfg, wait_only)
    assert a.curve == b.curve
    first = np.mean([r["mean_reward"] for r in a.curve[:20]])
    last = np.mean([r["mean_reward"] for r in a.curve[-20:]])
    assert last > first
    path = tmp_path / "p.json"
    save_policy(a.policy, path)
    loaded = load_policy(path)
    obs = np.random.default_rng(0).uniform(size=(5, OBS_DIM))
    assert np.array_equal(loaded.probs(obs), a.policy.probs(obs))
    nn.save_checkpoint(tmp_path / "x.json", a.policy.store, {"kind": "other"})
    with pytest.raises(ValueError, match="not a policy"):
        load_policy(tmp_path / "x.json")
