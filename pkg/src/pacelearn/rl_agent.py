"""Policy-gradient pacing agent trained from reward-machine grades of its own logs."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn_core as nn
from .dataset_gen import derive_seed
from .heart_model import Heart, HeartMode, HeartParams
from .loop import Controller, PacingLoop
from .ref_pacemaker import Pacer
from .rm_trainer import RewardMachine
from .trace_model import Symbol, TimingConfig

ACTIONS = (Symbol.AP, Symbol.VP, Symbol.NONE)  # NONE is "wait"
N_ACTIONS = len(ACTIONS)
OBS_DIM = 10
_ACTION_INDEX = {a: k for k, a in enumerate(ACTIONS)}


def observation(pacer: Pacer) -> np.ndarray:
    """State-byte bits (b7 first) followed by the two timer fractions."""
    byte = pacer.state_byte()
    bits = [(byte >> k) & 1 for k in range(7, -1, -1)]
    return np.array([*bits, *pacer.timer_fractions()], dtype=np.float64)


class Policy:
    """Two-hidden-layer tanh perceptron mapping observations to 3 action logits."""

    def __init__(self, hidden: int = 32, seed: int = 0, obs_dim: int = OBS_DIM):
        self.hidden = hidden
        self.obs_dim = obs_dim
        self.store = nn.ParamStore(np.float64)
        rng = np.random.default_rng(seed)
        self.store.init_uniform("W1", (obs_dim, hidden), obs_dim, rng)
        self.store.add("b1", np.zeros(hidden))
        self.store.init_uniform("W2", (hidden, hidden), hidden, rng)
        self.store.add("b2", np.zeros(hidden))
        self.store.init_uniform("W3", (hidden, N_ACTIONS), hidden, rng)
        self.store.add("b3", np.zeros(N_ACTIONS))

    def logits(self, obs) -> nn.Tensor:
        s = self.store
        h = nn.tanh_act(nn.add(nn.matmul(obs, s["W1"]), s["b1"]))
        h = nn.tanh_act(nn.add(nn.matmul(h, s["W2"]), s["b2"]))
        return nn.add(nn.matmul(h, s["W3"]), s["b3"])

    def probs(self, obs: np.ndarray) -> np.ndarray:
        """Action distribution for one observation (or a batch), without building a graph."""
        p = {k: t.data for k, t in self.store.items()}
        h = np.tanh(obs @ p["W1"] + p["b1"])
        h = np.tanh(h @ p["W2"] + p["b2"])
        return nn.softmax_rows(h @ p["W3"] + p["b3"])

    def greedy(self, obs: np.ndarray) -> Symbol:
        return ACTIONS[int(np.argmax(self.probs(obs)))]

    def controller(self) -> Controller:
        """Greedy controller usable in a :class:`PacingLoop`."""
        return lambda pacer: self.greedy(observation(pacer))

    def copy(self) -> "Policy":
        other = Policy(self.hidden, 0, self.obs_dim)
        other.store.load(self.store.state())
        return other


def next_action(policy: Policy, obs: np.ndarray, explore_rate: float, rng: np.random.Generator) -> int:
    """Index into ``ACTIONS``: uniform with probability ``explore_rate``, else sampled from the policy."""
    if rng.random() < explore_rate:
        return int(rng.integers(N_ACTIONS))
    p = policy.probs(obs)
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), N_ACTIONS - 1))


def discounted_return(rewards: Sequence[float], discount: float) -> float:
    if not 0 <= discount < 1:
        raise ValueError("discount must lie in [0, 1)")
    return float(sum(discount ** t * r for t, r in enumerate(rewards)))


BASELINES = ("mean", "state", "none")


@dataclass(frozen=True)
class AgentTrainConfig:
    episodes: int = 5000
    replay_size: int = 32
    log_len: int = 20
    explore_start: float = 0.1
    explore_end: float = 0.01
    discount: float = 0.98
    step_size: float = 1e-3
    baseline: str = "mean"  # "mean" over the replay, "state" (running mean per final state byte) or "none"
    baseline_rate: float = 0.05  # update rate of the per-state running means
    normalize: bool = False  # divide reward deviations by their replay standard deviation
    entropy_bonus: float = 0.0  # weight of the mean policy entropy added to the objective
    done_threshold: float = 0.5
    hidden: int = 32
    mode: str = "stochastic"
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 0 or self.replay_size < 1 or self.log_len < 1:
            raise ValueError("episodes >= 0, replay_size >= 1 and log_len >= 1 required")
        if not 0 <= self.discount < 1:
            raise ValueError("discount must lie in [0, 1)")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        for r in (self.explore_start, self.explore_end):
            if not 0 <= r <= 1:
                raise ValueError("explore rates must lie in [0, 1]")

    def explore_rate(self, episode: int) -> float:
        """Linear decay from ``explore_start`` to ``explore_end`` over the run."""
        if self.episodes <= 1:
            return self.explore_start
        frac = min(episode / (self.episodes - 1), 1.0)
        return self.explore_start + (self.explore_end - self.explore_start) * frac


@dataclass
class LogItem:
    observations: np.ndarray  # L x OBS_DIM
    actions: np.ndarray  # L action indices
    symbols: tuple[Symbol, ...]  # the graded window (context + log)
    reward: float
    done: bool


def final_byte(item: "LogItem") -> int:
    """State byte observed at the log's last step (the step the grade judges)."""
    bits = item.observations[-1, :8].astype(int)
    return int(sum(b << (7 - k) for k, b in enumerate(bits)))


class StateBaseline:
    """Running mean reward per final state byte.

    Comparing a log's reward with logs that ended in the same device state
    isolates the effect of the final action from how hard that state is.
    """

    def __init__(self, rate: float = 0.05):
        self.rate = rate
        self.values: dict[int, float] = {}

    def value(self, byte: int, default: float) -> float:
        return self.values.get(byte, default)

    def update(self, replay: "ReplayMemory") -> None:
        for item in replay:
            b = final_byte(item)
            old = self.values.get(b)
            self.values[b] = item.reward if old is None else old + self.rate * (item.reward - old)


class ReplayMemory:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: list[LogItem] = []

    def add(self, item: LogItem) -> None:
        if len(self.items) >= self.capacity:
            raise OverflowError(f"replay memory full ({self.capacity} logs)")
        self.items.append(item)

    def clear(self) -> None:
        self.items.clear()

    @property
    def full(self) -> bool:
        return len(self.items) >= self.capacity

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


class PacingEnv:
    """Heart plus the agent's device bookkeeping, with a symbol history for grading.

    ``reset`` starts a fresh heart and device and lets the reference automaton
    run ``burn_in`` ticks so the first log has a full context behind it.
    """

    def __init__(self, mode: HeartMode | str = HeartMode.STOCHASTIC, config: TimingConfig | None = None,
                 params: HeartParams | None = None, history: int = 21, burn_in: int | None = None,
                 seed: int = 0):
        self.mode = HeartMode.parse(mode)
        self.config = config or TimingConfig()
        self.params = params or HeartParams()
        self.history_len = history
        self.burn_in = history if burn_in is None else burn_in
        self.seed = seed
        self.resets = 0
        self.reset()

    def reset(self) -> None:
        heart = Heart(self.mode, self.params, derive_seed(self.seed, "env-heart", self.resets))
        self.resets += 1
        self.loop = PacingLoop(heart, self.config)
        self.history: deque[Symbol] = deque(maxlen=self.history_len)
        self._accepted: tuple[Symbol, ...] = ()
        for _ in range(self.burn_in):
            self.history.append(self.loop.step().symbol)
        self._accepted = self.loop.sense()

    @property
    def pacer(self) -> Pacer:
        return self.loop.pacer

    def observe(self) -> np.ndarray:
        return observation(self.loop.pacer)

    def step(self, action: Symbol) -> Symbol:
        """Commit ``action`` for the current tick, record its symbol and sense the next tick."""
        symbol = self.loop.act(action, self._accepted)
        self.history.append(symbol)
        self._accepted = self.loop.sense()
        return symbol


def run_episode(env: PacingEnv, policy: Policy, rm: RewardMachine, cfg: AgentTrainConfig,
                rng: np.random.Generator, explore_rate: float) -> ReplayMemory:
    """Fill a replay memory with graded logs, resetting the environment after a failed log."""
    if rm.window != cfg.log_len:
        raise ValueError(f"log length {cfg.log_len} does not match reward machine window {rm.window}")
    replay = ReplayMemory(cfg.replay_size)
    while not replay.full:
        obs = np.empty((cfg.log_len, OBS_DIM))
        acts = np.empty(cfg.log_len, dtype=np.int64)
        for t in range(cfg.log_len):
            obs[t] = env.observe()
            acts[t] = next_action(policy, obs[t], explore_rate, rng)
            env.step(ACTIONS[acts[t]])
        window = tuple(env.history)[-rm.log_len:]
        reward = rm.grade(window)
        done = reward < cfg.done_threshold
        replay.add(LogItem(obs, acts, window, reward, done))
        if done:
            env.reset()
    return replay


def policy_gradient(policy: Policy, replay: ReplayMemory, cfg: AgentTrainConfig,
                    state_baseline: StateBaseline | None = None) -> float:
    """Accumulate the gradient of the surrogate objective into the policy's store.

    The log's reward sits at its last step, so step ``t`` of a log of length
    ``L`` carries return ``discount ** (L-1-t) * reward``; the baseline is
    discounted the same way. Returns the objective.
    """
    if len(replay) == 0:
        raise ValueError("empty replay memory")
    rewards = np.array([it.reward for it in replay])
    if cfg.baseline == "mean":
        # equal rewards cancel exactly; the rounded mean alone can leave a 1e-16 residue
        dev = np.zeros_like(rewards) if np.all(rewards == rewards[0]) else rewards - rewards.mean()
    elif cfg.baseline == "state":
        if state_baseline is None:
            raise ValueError("a state baseline needs its running table")
        mean = rewards.mean()
        dev = rewards - np.array([state_baseline.value(final_byte(it), mean) for it in replay])
    else:
        dev = rewards.copy()
    if cfg.normalize:
        spread = rewards.std()
        dev = dev / spread if spread > 0 else np.zeros_like(dev)
    L = cfg.log_len
    weights = cfg.discount ** np.arange(L - 1, -1, -1)
    adv = (dev[:, None] * weights[None, :]).reshape(-1)
    obs = np.concatenate([it.observations for it in replay])
    acts = np.concatenate([it.actions for it in replay])
    policy.store.zero_grad()
    if not np.any(adv):
        return 0.0
    logits = policy.logits(obs)
    # weighted cross-entropy is -mean(adv * log pi); rescale to sum(adv * log pi) / n_logs
    nll = nn.softmax_cross_entropy(logits, acts, adv)
    objective = nn.scale(nll, -len(acts) / len(replay))
    if cfg.entropy_bonus:
        objective = nn.add(objective, nn.scale(nn.softmax_entropy(logits), cfg.entropy_bonus * L))
    nn.backward(objective)
    return float(objective.data)


def train_on_replay(policy: Policy, replay: ReplayMemory, cfg: AgentTrainConfig,
                    opt: nn.OptimConfig | None = None, state_baseline: StateBaseline | None = None) -> Policy:
    """One Adam ascent step on the replay; skipped when every advantage is zero."""
    policy_gradient(policy, replay, cfg, state_baseline)
    grads = policy.store.grads()
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise FloatingPointError("non-finite policy gradient")
    if any(np.any(g) for g in grads.values()):
        nn.adam_step(policy.store, opt or nn.OptimConfig(learning_rate=cfg.step_size), ascend=True)
    return policy


@dataclass
class FitResult:
    policy: Policy
    curve: list[dict] = field(default_factory=list)


def fit(cfg: AgentTrainConfig, rm: RewardMachine, env_factory: Callable[[int], PacingEnv] | None = None,
        config: TimingConfig | None = None, params: HeartParams | None = None,
        progress: Callable[[dict], None] | None = None) -> FitResult:
    """Alternate episodes of log collection and policy updates; replay is cleared each episode."""
    if rm.window != cfg.log_len:
        raise ValueError(f"log length {cfg.log_len} does not match reward machine window {rm.window}")
    policy = Policy(cfg.hidden, derive_seed(cfg.seed, "policy-init"))
    result = FitResult(policy)
    if cfg.episodes == 0:
        return result
    env_seed = derive_seed(cfg.seed, "env")
    if env_factory is None:
        env = PacingEnv(cfg.mode, config, params, history=rm.log_len, seed=env_seed)
    else:
        env = env_factory(env_seed)
    rng = np.random.default_rng(derive_seed(cfg.seed, "actions"))
    opt = nn.OptimConfig(learning_rate=cfg.step_size)
    table = StateBaseline(cfg.baseline_rate) if cfg.baseline == "state" else None
    for episode in range(cfg.episodes):
        explore = cfg.explore_rate(episode)
        replay = run_episode(env, policy, rm, cfg, rng, explore)
        train_on_replay(policy, replay, cfg, opt, table)
        if table is not None:
            table.update(replay)
        rewards = [it.reward for it in replay]
        row = {"episode": episode, "mean_reward": float(np.mean(rewards)),
               "done_rate": float(np.mean([it.done for it in replay])), "explore": explore}
        result.curve.append(row)
        if progress is not None:
            progress(row)
        replay.clear()
    return result


def save_policy(policy: Policy, path: str | Path, extra: dict | None = None) -> None:
    header = {"kind": "policy", "hidden": policy.hidden, "obs_dim": policy.obs_dim,
              "actions": [a.value for a in ACTIONS], **(extra or {})}
    nn.save_checkpoint(path, policy.store, header)


def load_policy(path: str | Path) -> Policy:
    header, arrays = nn.load_checkpoint(path)
    if header.get("kind") != "policy":
        raise ValueError(f"{path} is not a policy checkpoint")
    policy = Policy(int(header["hidden"]), 0, int(header["obs_dim"]))
    policy.store.load(arrays)
    return policy


def mean_reward_of(controller_policy: Callable[[np.ndarray], int], env: PacingEnv, rm: RewardMachine,
                   n_logs: int, log_len: int) -> float:
    """Average grade of ``n_logs`` consecutive logs produced by an index-returning policy."""
    total = 0.0
    for _ in range(n_logs):
        for _ in range(log_len):
            env.step(ACTIONS[controller_policy(env.observe())])
        total += rm.grade(tuple(env.history)[-rm.log_len:])
    return total / n_logs


def reference_policy(pacer_env: PacingEnv) -> Callable[[np.ndarray], int]:
    """Index-returning policy that defers to the reference automaton of ``pacer_env``."""
    return lambda _obs: _ACTION_INDEX[pacer_env.pacer.decide()]


def uniform_policy(rng: np.random.Generator) -> Callable[[np.ndarray], int]:
    return lambda _obs: int(rng.integers(N_ACTIONS))


def action_index(action: Symbol) -> int:
    return _ACTION_INDEX[action]


def is_finite_policy(policy: Policy) -> bool:
    return all(math.isfinite(float(np.sum(v))) for v in policy.store.state().values())
