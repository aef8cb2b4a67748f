"""Desk-scale vision-language-action stack with gaze-region reconstruction."""

__version__ = "0.1.0"
