"""Pivot-program-guided text-to-SQL with execution-based cross-verification."""

__version__ = "0.1.0"
