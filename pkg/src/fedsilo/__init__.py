"""fedsilo: self-hosted cross-silo federated learning service."""

__version__ = "0.1.0"
