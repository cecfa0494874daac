"""Adversarial attacks, swappable defenses, robustness metrics, and a
defense-training planner, built on a small reverse-mode autodiff engine."""

__version__ = "0.1.0"
