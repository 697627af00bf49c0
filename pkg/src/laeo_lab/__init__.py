"""Offline example-based control with a contrastive model of the discounted state occupancy."""

__version__ = "0.1.0"
