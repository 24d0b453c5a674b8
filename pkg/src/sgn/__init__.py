"""Structure-aware recipe generation at desk scale."""

__version__ = "0.1.0"
