"""Reputation polarity classification with a from-scratch BERT-style encoder."""

__version__ = "0.1.0"
