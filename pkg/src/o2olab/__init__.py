"""Desk-scale offline-to-online reinforcement learning laboratory."""

__version__ = "0.1.0"
