"""Federated meta-learning of channel-gated networks.

Accelerated proximal meta updates over inexact local solves, two-stage fast
adaptation at a target node, FedAvg and SNIP-based baselines, and numerical
diagnostics on quadratic federations.
"""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
