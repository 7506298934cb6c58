"""Shortcut flow matching over triplane latents for semantic scene completion."""

__version__ = "0.1.0"
