"""Temporal-logic embedded automata: LTL_f -> DFA -> graph embeddings -> logic loss."""

__version__ = "0.1.0"
