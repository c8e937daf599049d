"""Toy three-task suite and the experiment harness."""

from .harness import (
    ALL_ORDERS,
    FIXED_ORDER,
    SWEEP_AXES,
    build_tasks,
    build_trainer,
    expand_orders,
    run_grid,
    run_single,
    summarize_grid,
    summarize_sweep,
    sweep,
)
from .tasks import QUESTIONS, TASK_NAMES, ToyTask, gen_task_cls, gen_task_slot, gen_task_span, toy_tasks, toy_vocab

__all__ = [
    "ALL_ORDERS",
    "FIXED_ORDER",
    "QUESTIONS",
    "SWEEP_AXES",
    "TASK_NAMES",
    "ToyTask",
    "build_tasks",
    "build_trainer",
    "expand_orders",
    "gen_task_cls",
    "gen_task_slot",
    "gen_task_span",
    "run_grid",
    "run_single",
    "summarize_grid",
    "summarize_sweep",
    "sweep",
    "toy_tasks",
    "toy_vocab",
]
