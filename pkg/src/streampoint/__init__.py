"""Stateful recurrent pointmap transformer with a numpy autodiff substrate."""

__version__ = "0.1.0"
