"""Toulmin-structured clinical reasoning pipeline.

Builds staged diagnostic argument trajectories with best-of-K selection
against rubric-guided judges, scores them with robust multi-judge
aggregation, emits cumulative curriculum fine-tuning datasets, and serves
blinded trajectories to human raters.
"""

__version__ = "0.1.0"
