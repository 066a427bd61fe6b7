"""Isolated execution of generated analysis programs over a CSV bundle."""

from .runner import HarnessReply, HarnessRequest, run_pivot

__all__ = ["HarnessReply", "HarnessRequest", "run_pivot"]
