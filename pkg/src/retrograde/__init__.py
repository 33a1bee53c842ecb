"""Directed (forward or reverse order) execution of tiny payloads via a single-step controller."""

__version__ = "0.1.0"
