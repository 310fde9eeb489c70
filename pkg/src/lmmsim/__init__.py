"""Discrete-event simulator for multimodal model serving clusters."""

__version__ = "0.1.0"
