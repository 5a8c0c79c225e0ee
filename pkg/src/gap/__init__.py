"""Topology-adaptive pruning of CNN computational graphs.

Modules: ``ir`` (graph IR and serialization), ``topology`` (articulation
points, BN classification, groups, edge candidates), ``zoo`` (architectures),
``engine`` (forward/backward and SGD), ``regularize`` (sparsity retraining),
``pruner`` (global threshold and graph surgery), ``distill`` (self-taught KD),
``metrics`` (counters, latency, reports), ``data`` (datasets) and ``cli``.
"""

__version__ = "0.1.0"
