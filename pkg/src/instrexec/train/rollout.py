"""Episode rollouts behind a small agent interface, optionally spread over worker processes."""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..env.gridworld import Instruction, WorldConfig, reset, step


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    world: WorldConfig
    instructions: tuple          # Instruction tuple the environment checks
    sentences: tuple = ()        # the same list as Sentences, for agents that read language
    episode: int = 0

    @classmethod
    def from_sentences(cls, world, sentences, episode=0):
        return cls(world, tuple(s.instruction() for s in sentences), tuple(sentences), episode)


@dataclass
class EpisodeTrace:
    """Per-step record of one episode.  ``diag`` holds agent-specific lists (values, c, b, g, ...)."""

    episode: int
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    completed: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    diag: dict = field(default_factory=dict)
    success: bool = False
    truncated: bool = False
    n_instructions: int = 0

    @property
    def steps(self):
        return len(self.actions)

    @property
    def total_reward(self):
        return float(np.sum(self.rewards))

    @property
    def terminal(self):
        """True termination (bootstrap 0) as opposed to a time-limit cut."""
        return not self.truncated

    def digest(self):
        body = json.dumps({"episode": self.episode, "actions": self.actions,
                           "rewards": [repr(float(r)) for r in self.rewards],
                           "completed": self.completed, "success": self.success}, sort_keys=True)
        return hashlib.sha256(body.encode()).hexdigest()

    def records(self):
        """Line-delimited export rows: step, action code, reward, done, completion index."""
        n = self.steps
        return [{"step": t, "action": int(a), "reward": float(r), "done": t == n - 1, "completed": int(c)}
                for t, (a, r, c) in enumerate(zip(self.actions, self.rewards, self.completed))]


class Agent:
    """Agent interface: ``start`` builds a per-episode controller exposing ``act(state, obs)``.

    ``act`` returns ``(action, diag)`` where ``diag`` is a dict of scalars recorded in the trace.
    Agents must be picklable to run under several workers.
    """

    name = "agent"

    def start(self, state, spec, rng):
        raise NotImplementedError


class ScriptedAgent(Agent):
    def __init__(self, policy, name=None, **kwargs):
        self.policy = policy
        self.kwargs = kwargs
        self.name = name or policy.__name__

    def start(self, state, spec, rng):
        return self

    def act(self, state, obs):
        return int(self.policy(state, **self.kwargs)), {}


class NoopAgent(Agent):
    name = "noop"

    def start(self, state, spec, rng):
        return self

    def act(self, state, obs):
        return 0, {}


class RandomAgent(Agent):
    name = "random"

    def start(self, state, spec, rng):
        return _RandomController(rng)


class _RandomController:
    def __init__(self, rng):
        self.rng = rng

    def act(self, state, obs):
        return int(self.rng.integers(13)), {}


def run_episode(agent, spec, seed, record_obs=False):
    rng = np.random.default_rng([seed & (2**63 - 1), spec.episode])
    state, obs = reset(spec.world, spec.instructions, episode=spec.episode)
    ctrl = agent.start(state, spec, rng)
    trace = EpisodeTrace(spec.episode, n_instructions=len(spec.instructions))
    done = state.done
    while not done:
        if record_obs:
            trace.observations.append(obs)
        action, diag = ctrl.act(state, obs)
        for k, v in diag.items():
            trace.diag.setdefault(k, []).append(v)
        state, obs, reward, done, info = step(state, action, inplace=True)
        trace.actions.append(int(action))
        trace.rewards.append(float(reward))
        trace.completed.append(int(info["completed"]))
        trace.success = bool(info["success"])
        trace.truncated = bool(info["truncated"])
    if not trace.actions:
        trace.success = True
    return trace


def _run_chunk(agent, specs, seed, record_obs):
    return [run_episode(agent, s, seed, record_obs) for s in specs]


def rollout_batch(agent, specs, n_episodes=None, workers=1, seed=0, record_obs=False):
    """Run ``n_episodes`` episodes (cycling through ``specs``) and return traces in episode order.

    Episode ``i`` uses ``specs[i % len(specs)]``; its environment and agent randomness
    depend only on ``(seed, spec.episode)``, so the result does not depend on ``workers``.
    """
    specs = list(specs)
    n_episodes = len(specs) if n_episodes is None else n_episodes
    if n_episodes < 1 or not specs:
        raise ValueError("n_episodes must be >= 1")
    todo = [specs[i % len(specs)] for i in range(n_episodes)]
    if len(todo) > len(specs):
        todo = [EpisodeSpec(s.world, s.instructions, s.sentences, i) for i, s in enumerate(todo)]
    if workers <= 1:
        return _run_chunk(agent, todo, seed, record_obs)
    chunks = [todo[w::workers] for w in range(workers)]
    try:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chunk, agent, c, seed, record_obs) for c in chunks if c]
            parts = [f.result() for f in futures]
    except Exception as exc:  # noqa: BLE001
        raise RolloutError(f"rollout worker failed: {exc!r}") from exc
    out = [None] * len(todo)
    for w, part in enumerate(parts):
        for j, trace in enumerate(part):
            out[w + j * workers] = trace
    return out


def single_task_spec(world, instruction, episode=0):
    if not isinstance(instruction, Instruction):
        raise TypeError("instruction must be an Instruction")
    return EpisodeSpec(world, (instruction,), (), episode)
