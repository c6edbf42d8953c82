"""Makeup-based facial privacy protection via test-time decoder optimization."""

__version__ = "0.1.0"
