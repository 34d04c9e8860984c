"""Shared models and monitoring for the remdet toolkit."""

__version__ = "0.1.0"
