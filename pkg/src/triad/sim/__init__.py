"""Deterministic discrete-event simulation of a Triad deployment."""
