"""fdh: symbolic protocol verifier for the full Diffie-Hellman field structure."""

__version__ = "0.1.0"
