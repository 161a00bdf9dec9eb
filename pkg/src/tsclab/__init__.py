"""Decentralized traffic-signal control with latent task beliefs and neighbor-invariant shaping."""

__version__ = "0.1.0"
