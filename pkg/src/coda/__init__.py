"""Continuous-to-discrete tokenizer adaptation at desk scale."""

__version__ = "0.1.0"
