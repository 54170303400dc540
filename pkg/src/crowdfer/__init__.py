"""Crowd-label aggregation and CNN training under MV / ML / PLD / CEL targets."""

__version__ = "0.1.0"
