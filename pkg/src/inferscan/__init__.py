"""Censorship measurement via indirect side channels, plus a simulator oracle."""

__version__ = "0.1.0"
