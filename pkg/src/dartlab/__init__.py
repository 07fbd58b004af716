"""Desk-scale lab for capability-interference attribution and token-routed
dual-adapter reinforcement learning on a tiny tool-using policy."""

__version__ = "0.1.0"
