"""Region-decoupled GRPO fine-tuning of a flow-matching image editor on a synthetic shape-editing task."""

__version__ = "0.1.0"
