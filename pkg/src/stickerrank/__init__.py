"""Sticker response ranking for multi-turn dialog with user-preference memory."""

__version__ = "0.1.0"
