"""Point-prompt attack and defence agents on a dual-space patch graph."""

__version__ = "0.1.0"
