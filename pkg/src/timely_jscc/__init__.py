"""Timeliness-aware variable-length image transmission: VoI/AoI metrics, an AWGN link
simulator, analog and surrogate codecs, and a PPO code-length allocator."""

__version__ = "0.1.0"
