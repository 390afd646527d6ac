"""Building detection on synthetic satellite scenes, end to end."""

__version__ = "0.1.0"
