"""Desk-scale reasoning-model pipeline: surgery, CPT/SFT, GRPO and merging on a tiny transformer."""

__version__ = "0.1.0"
