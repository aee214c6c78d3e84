"""
fedsim - a deterministic federated averaging simulator.

Uploader-partitioned clients, log-mel patch features, FedAvg with stale and
size-proportional variants, and PR-AUC evaluation.
"""

__version__ = "0.1.0"
