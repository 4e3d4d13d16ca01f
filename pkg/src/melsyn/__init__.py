"""Desk-scale image+text conditioned music diffusion with a learned visual synapse."""

__version__ = "0.1.0"
