"""Desk-scale testbed for benchmarking inter-cluster service communication.

Two emulated clusters are joined by pluggable interconnects over links with
configurable delay, jitter and loss; a load generator drives the standard
workloads and the bench runner sweeps the full tool/scenario/payload matrix.
"""

__version__ = "0.1.0"
