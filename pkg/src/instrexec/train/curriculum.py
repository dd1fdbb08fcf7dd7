"""Success-driven curriculum over world size, densities and instruction count."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..env.gridworld import WorldConfig


@dataclass(frozen=True)
class CurriculumRanges:
    sizes: tuple = (5, 6, 7, 8)
    wall_density: tuple = (0.0, 0.1)
    object_density: tuple = (0.1, 0.8)
    instructions: tuple = (1, 2, 3, 4)
    tiers: int = 4
    advance: float = 0.85
    retreat: float = 0.5
    window: int = 100


SKILL_RANGES = CurriculumRanges()
META_RANGES = CurriculumRanges(object_density=(0.0, 0.15))


@dataclass
class CurriculumState:
    tier: int = 0
    ranges: CurriculumRanges = SKILL_RANGES
    history: deque = field(default_factory=lambda: deque(maxlen=100))

    def __post_init__(self):
        self.history = deque(self.history, maxlen=self.ranges.window)

    @property
    def success_rate(self):
        return float(np.mean(self.history)) if self.history else 0.0

    def tier_params(self, tier=None):
        """Upper bounds unlocked at ``tier``: sizes, wall density, object density, instruction counts."""
        t = self.tier if tier is None else tier
        frac = t / max(self.ranges.tiers - 1, 1)
        lo_w, hi_w = self.ranges.wall_density
        lo_o, hi_o = self.ranges.object_density
        n_size = 1 + round(frac * (len(self.ranges.sizes) - 1))
        n_ins = 1 + round(frac * (len(self.ranges.instructions) - 1))
        return {
            "sizes": self.ranges.sizes[:n_size],
            "wall_density": lo_w + frac * (hi_w - lo_w),
            "object_density": (lo_o, lo_o + frac * (hi_o - lo_o)),
            "instructions": self.ranges.instructions[:n_ins],
        }

    def sample(self, rng, base=None, **overrides):
        """Draw a WorldConfig and an instruction count from the current tier."""
        tp = self.tier_params()
        base = base or WorldConfig()
        size = int(rng.choice(tp["sizes"]))
        lo, hi = tp["object_density"]
        kw = dict(height=size, width=size, wall_density=float(rng.uniform(0, tp["wall_density"])),
                  object_density=float(rng.uniform(lo, hi)), seed=int(rng.integers(2**62)))
        kw.update(overrides)
        cfg = WorldConfig(**{**base.__dict__, **kw})
        return cfg, int(rng.choice(tp["instructions"]))


def curriculum_adjust(state, success_rate):
    """One tier up when the rate reaches ``advance``, one down below ``retreat``, clamped at the ends."""
    if not 0 <= success_rate <= 1:
        raise ValueError("success rate must lie in [0, 1]")
    tier = state.tier
    if success_rate >= state.ranges.advance:
        tier = min(tier + 1, state.ranges.tiers - 1)
    elif success_rate < state.ranges.retreat:
        tier = max(tier - 1, 0)
    if tier == state.tier:
        return state
    # the moving average restarts at each tier change so one tier's record cannot trigger the next move
    return CurriculumState(tier, state.ranges)


def record_and_adjust(state, successes):
    """Append episode outcomes; adjust once the window is full."""
    state.history.extend(float(s) for s in successes)
    if len(state.history) < state.ranges.window:
        return state
    return curriculum_adjust(state, state.success_rate)
