"""Predicate branching with memory-based knowledge transfer for long-tailed relation prediction."""

__version__ = "0.1.0"
