"""Evaluation harness: paired-seed episodes per (agent, instruction count, seen/unseen)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..env.gridworld import WorldConfig
from ..tasks import sample_instructions
from ..train.rollout import EpisodeSpec, rollout_batch

EVAL_WORLD = WorldConfig(height=10, width=10, wall_density=0.05, water_density=0.05, object_density=0.1,
                         episode_limit=600)


@dataclass
class EvalRow:
    agent: str
    instructions: int
    unseen: bool
    mean_reward: float
    success_rate: float
    mean_steps: float
    mean_completed: float
    episodes: int
    seed_range: tuple


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def row(self, agent, count, unseen):
        for r in self.rows:
            if (r.agent, r.instructions, r.unseen) == (agent, count, unseen):
                return r
        raise KeyError((agent, count, unseen))

    def to_text(self):
        head = f"{'agent':<14}{'#ins':>5}{'set':>8}{'reward':>9}{'success':>9}{'steps':>8}{'done':>7}{'eps':>6}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.agent:<14}{r.instructions:>5}{'unseen' if r.unseen else 'seen':>8}{r.mean_reward:>9.2f}"
                         f"{r.success_rate:>9.3f}{r.mean_steps:>8.1f}{r.mean_completed:>7.2f}{r.episodes:>6}")
        return "\n".join(lines)

    def to_jsonl(self):
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.rows)

    def plot_data(self):
        """Per-agent curves over instruction count: {agent: {"seen"|"unseen": {metric: [(count, value)]}}}."""
        out = {}
        for r in self.rows:
            curves = out.setdefault(r.agent, {}).setdefault("unseen" if r.unseen else "seen", {})
            for metric in ("mean_reward", "success_rate", "mean_steps", "mean_completed"):
                curves.setdefault(metric, []).append((r.instructions, getattr(r, metric)))
        return out

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.to_text() + "\n")
        (out / "report.jsonl").write_text(self.to_jsonl())
        (out / "plot_data.json").write_text(json.dumps(self.plot_data(), indent=1))


def episode_specs(split, count, unseen, n, seed, world=EVAL_WORLD):
    """The fixed seed grid for one cell: every agent sees exactly these worlds and instruction lists."""
    specs = []
    for i in range(n):
        ep_seed = seed * 1_000_003 + count * 1_009 + int(unseen) * 7 + i
        sentences = sample_instructions(count, split, unseen, ep_seed)
        w = WorldConfig(**{**asdict(world), "seed": seed})
        specs.append(EpisodeSpec.from_sentences(w, sentences, episode=ep_seed))
    return specs


def evaluate(agents, split, instruction_counts, episodes_per_cell, seed=0, world=EVAL_WORLD, workers=1,
             sets=(False, True)):
    """Run every agent on the same episodes; one row per (agent, count, seen/unseen)."""
    if any(c < 1 for c in instruction_counts):
        raise ValueError("instruction counts must be >= 1")
    if episodes_per_cell < 1:
        raise ValueError("episodes_per_cell must be >= 1")
    if isinstance(agents, dict):
        agents = list(agents.items())
    else:
        agents = [(a.name, a) for a in agents]
    report = EvalReport()
    for name, agent in agents:
        for count in instruction_counts:
            for unseen in sets:
                specs = episode_specs(split, count, unseen, episodes_per_cell, seed, world)
                traces = rollout_batch(agent, specs, workers=workers, seed=seed)
                report.rows.append(EvalRow(
                    agent=name, instructions=count, unseen=unseen,
                    mean_reward=float(np.mean([t.total_reward for t in traces])),
                    success_rate=float(np.mean([t.success for t in traces])),
                    mean_steps=float(np.mean([t.steps for t in traces])),
                    mean_completed=float(np.mean([t.completed[-1] if t.completed else 0 for t in traces])),
                    episodes=len(traces),
                    seed_range=(specs[0].episode, specs[-1].episode),
                ))
    return report
