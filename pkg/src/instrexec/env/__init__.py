from .gridworld import (
    Action, GenerationError, EpisodeDone, GridState, Instruction, WorldConfig, N_ACTIONS, N_CHANNELS,
    observe, reset, step, subtask_status, instruction_done, transform_rule,
)
from .tables import WorldTables, default_tables, load_tables

__all__ = [
    "Action", "GenerationError", "EpisodeDone", "GridState", "Instruction", "WorldConfig", "N_ACTIONS",
    "N_CHANNELS", "observe", "reset", "step", "subtask_status", "instruction_done", "transform_rule",
    "WorldTables", "default_tables", "load_tables",
]
