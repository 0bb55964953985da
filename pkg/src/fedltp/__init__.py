"""Federated learning with lottery-ticket pruning and differential privacy.

A desk-scale simulator: masked MLPs trained by clipped, noised local SGD,
heterogeneous sparse aggregation, Laplace-noised validation for final-model
selection, and a Renyi-DP accountant that stops training at a budget.
"""

__version__ = "0.1.0"
