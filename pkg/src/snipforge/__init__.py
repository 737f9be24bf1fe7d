"""Query-aware snippet extraction: DeepQSE and the two-stage Efficient-DeepQSE pipeline."""

__version__ = "0.1.0"
