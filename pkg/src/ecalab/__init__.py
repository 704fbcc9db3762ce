"""Elementary cellular automata complexity vs. downstream capability of small transformers."""

__version__ = "0.1.0"
