"""Distilling frozen per-task specialists into one universal network.

Subpackages cover synthetic data suites, the model zoo (encoders, decoders,
adapters), distillation losses, loss balancers, the two-stage trainer with
task grouping, few-shot and retrieval evaluation, and task metrics. The
`unidistill` console script drives the full pipeline from a YAML config.
"""

__version__ = "0.1.0"
