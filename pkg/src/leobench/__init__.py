"""Desk-scale LEO broadband measurement testbed.

A self-contained stand-in for a distributed satellite-broadband measurement
deployment: a simulated user terminal and link, an orchestrator and node
agents with trigger-based scheduling and scavenger-mode preemption, and
offline analysis pipelines (latency dissection, performance prediction,
congestion-control parameter sweeps, ABR/QoE evaluation).
"""

__version__ = "0.1.0"
