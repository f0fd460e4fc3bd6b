"""Discrete-event simulator for serving many LLMs on a shared CPU/GPU cluster."""

__version__ = "0.1.0"
