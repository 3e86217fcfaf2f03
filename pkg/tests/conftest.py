import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def tiny_config_dict(out):
    """A run small enough for unit tests: 8 hidden units, groups of 3, short budgets."""
    return {
        "seed": 3,
        "iterations": 2,
        "eval_tasks": 6,
        "out": str(out),
        "arch": {"hidden": [8], "time_k": 1},
        "sampler": {"steps": 2},
        "optim": {"group_size": 3, "tasks_per_iter": 1},
        "pretrain": {"steps": 5, "batch": 4, "pool": 20, "val_tasks": 4, "log_every": 1},
    }


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
