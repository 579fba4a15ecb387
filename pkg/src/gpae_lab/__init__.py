"""Per-agent advantage estimation lab: tabular oracle, estimators, trace
corrections and a small numpy actor-critic trainer."""

__version__ = "0.1.0"
