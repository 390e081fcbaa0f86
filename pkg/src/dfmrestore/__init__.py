"""Degradation-sensing video restoration on synthetically degraded clips."""

__version__ = "0.1.0"
