"""Hierarchical next-goal prediction for goal-guided conversational recommendation."""

__version__ = "0.1.0"
