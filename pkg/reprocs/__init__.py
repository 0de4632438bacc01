"""
ReProCS - online robust PCA and online matrix completion
Recursive projected compressive sensing with subspace-change detection,
synthetic scenario generators, assumption checks and a Monte-Carlo harness.
"""

__version__ = "1.0.0"
