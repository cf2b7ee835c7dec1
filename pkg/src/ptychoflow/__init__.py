"""Streaming ptychography workflow: simulation, phase retrieval, surrogate training and edge inference."""

__version__ = "0.1.0"
